#pragma once

#include <iosfwd>
#include <string>

namespace ssmlab::cli {

enum ExitCode { kOk = 0, kDiverged = 1, kUsage = 2, kVerifyFailed = 3 };

/// Runs `ssmlab <command> ...`. argv[0] is the program name.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// SHA-1 of the git blob object for `content` ("blob <size>\0" + content).
std::string git_blob_sha1(const std::string& content);

} // namespace ssmlab::cli
