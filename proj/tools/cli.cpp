#include "cli.hpp"

#include <openssl/evp.h>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "toml.hpp"

#include "ssmlab/errors.hpp"
#include "ssmlab/kernel.hpp"
#include "ssmlab/perturb.hpp"
#include "ssmlab/reparam.hpp"
#include "ssmlab/ssm.hpp"
#include "ssmlab/text.hpp"
#include "ssmlab/train.hpp"

namespace ssmlab::cli {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

enum class Kind { Int, Float, Bool, String, StringList, FloatList, OptFloat, OptString };

struct Key {
    std::string name;
    Kind kind;
    json fallback;
    std::string help;
    bool required = false;
};

std::string kind_label(Kind kind) {
    switch (kind) {
    case Kind::Int: return "INT";
    case Kind::Float: return "FLOAT";
    case Kind::Bool: return "BOOL";
    case Kind::String: return "TEXT";
    case Kind::StringList: return "TEXT ...";
    case Kind::FloatList: return "FLOAT,...";
    case Kind::OptFloat: return "FLOAT";
    case Kind::OptString: return "PATH";
    }
    return "";
}

const std::vector<Key>& gen_data_keys() {
    static const std::vector<Key> keys = {
        {"target", Kind::String, nullptr, "target kernel: poly:<gamma>, expdecay:<rate> or csv:<path>", true},
        {"k", Kind::Int, 100, "sequence length"},
        {"n", Kind::Int, 153600, "number of sequences"},
        {"dt", Kind::Float, 1.0, "time step"},
        {"seed", Kind::Int, 0, "random seed (SSMLAB_SEED overrides the config file)"},
        {"heaviside_probe", Kind::Bool, false, "replace sample 0 by the unit step input"},
        {"out", Kind::String, "dataset.csv", "output CSV (manifest goes to <out>.manifest.json)"},
    };
    return keys;
}

const std::vector<Key>& train_keys() {
    static const std::vector<Key> keys = {
        {"target", Kind::String, "poly:1.1", "target kernel: poly:<gamma>, expdecay:<rate> or csv:<path>"},
        {"m", Kind::Int, 16, "hidden width"},
        {"d", Kind::Int, 1, "input dimension (only 1 is supported)"},
        {"scheme", Kind::String, "exp@cont", "reparameterization, family[:a=..,b=..]@{cont|disc}"},
        {"activation", Kind::String, "tanh", "readout activation: tanh, identity, sigmoid, softsign"},
        {"k", Kind::Int, 100, "sequence length"},
        {"n", Kind::Int, 153600, "dataset size"},
        {"batch_size", Kind::Int, 512, "mini-batch size (must divide n)"},
        {"lr", Kind::Float, 0.01, "learning rate"},
        {"optimizer", Kind::String, "adam", "sgd or adam"},
        {"adam_beta1", Kind::Float, 0.9, "Adam first-moment decay"},
        {"adam_beta2", Kind::Float, 0.999, "Adam second-moment decay"},
        {"adam_eps", Kind::Float, 1e-8, "Adam epsilon"},
        {"epochs", Kind::Int, 1, "passes over the dataset"},
        {"max_steps", Kind::Int, 0, "stop after this many steps (0: no limit)"},
        {"seed", Kind::Int, 0, "random seed (SSMLAB_SEED overrides the config file)"},
        {"loss", Kind::String, "mse", "mse or l1_kernel (linear models only)"},
        {"dt", Kind::Float, 1.0, "time step"},
        {"train_bias", Kind::Bool, true, "train the input bias b"},
        {"init_low", Kind::OptFloat, nullptr, "lower end of the initial eigenvalue range"},
        {"init_high", Kind::OptFloat, nullptr, "upper end of the initial eigenvalue range"},
        {"dataset", Kind::OptString, nullptr, "train on this dataset CSV instead of generating one"},
        {"warm_start", Kind::OptString, nullptr, "start from this checkpoint"},
        {"out_dir", Kind::String, "run", "directory for checkpoint.json, telemetry.csv and manifest.json"},
    };
    return keys;
}

const std::vector<Key>& perturb_keys() {
    static const std::vector<Key> keys = {
        {"checkpoints", Kind::StringList, json::array(), "checkpoint JSON files, one per width", true},
        {"target", Kind::String, "poly:1.1", "target kernel the checkpoints approximate"},
        {"betas", Kind::String, "geo:1e-3:sqrt2:21", "beta grid: geo:start:ratio:count or a comma list starting at 0"},
        {"samples_per_beta", Kind::Int, 30, "perturbation directions per beta"},
        {"perturb_set", Kind::String, "recurrent_only", "recurrent_only or all_weights"},
        {"metric", Kind::String, "l1_kernel", "l1_kernel or sobolev_empirical"},
        {"space", Kind::String, "weight", "perturb w (weight) or lambda (eigenvalue)"},
        {"seed", Kind::Int, 0, "random seed (SSMLAB_SEED overrides the config file)"},
        {"window_steps", Kind::Int, 100, "steps in the evaluation window"},
        {"probe_count", Kind::Int, 64, "probe inputs for sobolev_empirical"},
        {"out", Kind::String, "perturbation.csv", "output CSV (manifest goes to <out>.manifest.json)"},
    };
    return keys;
}

const std::vector<Key>& gradscale_keys() {
    static const std::vector<Key> keys = {
        {"schemes", Kind::StringList,
         json::array({"relu@cont", "exp@cont", "softplus@cont", "best@cont", "relu@disc", "exp@disc", "softplus@disc",
                      "tanh@disc", "best@disc"}),
         "schemes to tabulate (repeat the flag)"},
        {"w_min", Kind::Float, -5.0, "first w"},
        {"w_max", Kind::Float, 5.0, "last w"},
        {"w_step", Kind::Float, 0.1, "w spacing"},
        {"out", Kind::String, "gradscale.csv", "output CSV (manifest goes to <out>.manifest.json)"},
    };
    return keys;
}

const std::vector<Key>& verify_keys() {
    static const std::vector<Key> keys = {
        {"schemes", Kind::StringList, json::array({"exp@cont", "softplus@cont", "best:a=1,b=1@cont", "direct@cont"}),
         "continuous schemes to check (repeat the flag)"},
        {"betas", Kind::FloatList, json::array({0.01, 0.1, 0.5, 1.0}), "perturbation radii"},
        {"w_min", Kind::Float, -5.0, "first w"},
        {"w_max", Kind::Float, 5.0, "last w"},
        {"w_step", Kind::Float, 0.1, "w spacing"},
        {"out", Kind::OptString, nullptr, "also write the report to this file"},
    };
    return keys;
}

const std::vector<Key>& keys_for(const std::string& command) {
    if (command == "gen-data") return gen_data_keys();
    if (command == "train") return train_keys();
    if (command == "perturb") return perturb_keys();
    if (command == "gradscale") return gradscale_keys();
    return verify_keys();
}

// ---------------------------------------------------------------- config

json toml_to_json(const toml::node& node) {
    if (const auto* t = node.as_table()) {
        json j = json::object();
        for (auto&& [k, v] : *t) j[std::string(k.str())] = toml_to_json(v);
        return j;
    }
    if (const auto* a = node.as_array()) {
        json j = json::array();
        for (auto&& v : *a) j.push_back(toml_to_json(v));
        return j;
    }
    if (const auto* s = node.as_string()) return s->get();
    if (const auto* i = node.as_integer()) return i->get();
    if (const auto* f = node.as_floating_point()) return f->get();
    if (const auto* b = node.as_boolean()) return b->get();
    throw ConfigError("unsupported TOML value type (dates and times are not accepted)");
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

json load_config_file(const fs::path& path, const std::string& command) {
    const std::string text = read_file(path);
    json j;
    const auto ext = path.extension().string();
    if (ext == ".toml") {
        try {
            j = toml_to_json(toml::parse(text, path.string()));
        } catch (const toml::parse_error& e) {
            throw ConfigError("invalid TOML in " + path.string() + ": " + std::string(e.description()));
        }
    } else if (ext == ".json") {
        try {
            j = json::parse(text);
        } catch (const json::parse_error& e) {
            throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
        }
    } else {
        throw ConfigError("config file must end in .toml or .json: " + path.string());
    }
    if (!j.is_object()) throw ConfigError("config " + path.string() + " must be a table/object");
    // A run manifest can be fed back in; its resolved config is replayed.
    if (j.contains("command") && j.contains("config")) {
        if (j["command"] != command)
            throw ConfigError("manifest " + path.string() + " was written by '" + j["command"].get<std::string>() + "'");
        j = j["config"];
    }
    return j;
}

void check_type(const Key& key, const json& v) {
    bool ok = false;
    switch (key.kind) {
    case Kind::Int: ok = v.is_number_integer() && (v.is_number_unsigned() || v.get<std::int64_t>() >= 0); break;
    case Kind::Float: ok = v.is_number(); break;
    case Kind::Bool: ok = v.is_boolean(); break;
    case Kind::String: ok = v.is_string(); break;
    case Kind::StringList:
        ok = v.is_array() && std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_string(); });
        break;
    case Kind::FloatList:
        ok = v.is_array() && std::all_of(v.begin(), v.end(), [](const json& e) { return e.is_number(); });
        break;
    case Kind::OptFloat: ok = v.is_null() || v.is_number(); break;
    case Kind::OptString: ok = v.is_null() || v.is_string(); break;
    }
    if (!ok) throw ConfigError("config key '" + key.name + "' expects " + kind_label(key.kind));
}

json parse_cli_value(const Key& key, const std::vector<std::string>& raw) {
    auto scalar = [&](const std::string& s) -> json {
        switch (key.kind) {
        case Kind::Int: {
            std::uint64_t v = 0;
            auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
            if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty())
                throw ConfigError("--" + key.name + " expects a nonnegative integer, got '" + s + "'");
            return v;
        }
        case Kind::Float:
        case Kind::OptFloat: return parse_double(s, "--" + key.name);
        case Kind::Bool:
            if (s == "true" || s == "1") return true;
            if (s == "false" || s == "0") return false;
            throw ConfigError("--" + key.name + " expects true or false");
        default: return s;
        }
    };
    if (key.kind == Kind::StringList) return json(raw);
    if (key.kind == Kind::FloatList) {
        json arr = json::array();
        for (const auto& item : raw) {
            for (auto part : split(item, ',')) arr.push_back(parse_double(part, "--" + key.name));
        }
        return arr;
    }
    return scalar(raw.back());
}

struct Options {
    std::string config_path;
    std::map<std::string, std::vector<std::string>> values;
    int workers = 1;
    bool force = false;
};

json resolve_config(const std::string& command, const Options& opts) {
    const auto& keys = keys_for(command);
    json cfg = json::object();
    for (const auto& key : keys) cfg[key.name] = key.fallback;
    if (!opts.config_path.empty()) {
        const json file = load_config_file(opts.config_path, command);
        for (auto it = file.begin(); it != file.end(); ++it) {
            const auto found = std::find_if(keys.begin(), keys.end(), [&](const Key& k) { return k.name == it.key(); });
            if (found == keys.end()) throw ConfigError("unknown config key '" + it.key() + "' for " + command);
            json v = it.value();
            if (found->kind == Kind::StringList && v.is_string()) v = json::array({v});
            check_type(*found, v);
            cfg[it.key()] = v;
        }
    }
    if (const char* env = std::getenv("SSMLAB_SEED"); env && cfg.contains("seed")) {
        const Key* seed_key = &*std::find_if(keys.begin(), keys.end(), [](const Key& k) { return k.name == "seed"; });
        cfg["seed"] = parse_cli_value(*seed_key, {env});
    }
    for (const auto& key : keys) {
        const auto it = opts.values.find(key.name);
        if (it != opts.values.end() && !it->second.empty()) cfg[key.name] = parse_cli_value(key, it->second);
    }
    for (const auto& key : keys) {
        const json& v = cfg[key.name];
        if (key.required && (v.is_null() || (v.is_array() && v.empty())))
            throw ConfigError("missing required config key '" + key.name + "'");
    }
    return cfg;
}

// ---------------------------------------------------------------- outputs

struct Run {
    std::string command;
    json config;
    int workers = 1;
    bool force = false;
    std::vector<fs::path> inputs;
    std::vector<fs::path> outputs;
    json extra = json::object();
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
};

void claim_output(Run& run, const fs::path& path) {
    if (fs::exists(path) && !run.force)
        throw ConfigError("refusing to overwrite " + path.string() + " (pass --force)");
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    run.outputs.push_back(path);
}

std::ofstream open_output(const fs::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + path.string());
    return out;
}

void write_manifest(const Run& run, const fs::path& path) {
    json m;
    m["command"] = run.command;
    m["config"] = run.config;
    m["seed"] = run.config.contains("seed") ? run.config["seed"] : json(nullptr);
    m["workers"] = run.workers;
    json inputs = json::array();
    for (const auto& p : run.inputs) inputs.push_back({{"path", p.string()}, {"sha1", git_blob_sha1(read_file(p))}});
    m["inputs"] = inputs;
    json outputs = json::array();
    for (const auto& p : run.outputs) outputs.push_back(p.string());
    m["outputs"] = outputs;
    for (auto it = run.extra.begin(); it != run.extra.end(); ++it) m[it.key()] = it.value();
    m["duration_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - run.start).count();
    auto out = open_output(path);
    out << m.dump(2) << '\n';
}

void note_kernel_input(Run& run, const std::string& spec) {
    if (spec.starts_with("csv:")) run.inputs.emplace_back(spec.substr(4));
}

fs::path manifest_beside(const fs::path& out) { return fs::path(out.string() + ".manifest.json"); }

// ---------------------------------------------------------------- commands

int cmd_gen_data(Run& run, std::ostream& out) {
    const json& c = run.config;
    const auto target = parse_kernel_spec(c["target"].get<std::string>());
    note_kernel_input(run, c["target"]);
    const auto k = c["k"].get<std::size_t>();
    const auto n = c["n"].get<std::size_t>();
    if (k == 0 || n == 0) throw ConfigError("k and n must be positive");
    const fs::path path = c["out"].get<std::string>();
    const fs::path manifest = manifest_beside(path);
    claim_output(run, path);
    claim_output(run, manifest);
    run.outputs.pop_back();
    const auto data = generate_dataset(target, k, n, c["dt"].get<double>(), c["seed"].get<std::uint64_t>(),
                                       c["heaviside_probe"].get<bool>(), run.workers);
    {
        auto file = open_output(path);
        write_dataset_csv(file, data);
    }
    write_manifest(run, manifest);
    out << "wrote " << path.string() << " (" << n << " sequences of length " << k << ")\n";
    return kOk;
}

TrainConfig train_config_from(const json& c, Run& run) {
    TrainConfig cfg;
    cfg.target = parse_kernel_spec(c["target"].get<std::string>());
    note_kernel_input(run, c["target"]);
    cfg.width = c["m"].get<std::size_t>();
    cfg.input_dim = c["d"].get<std::size_t>();
    cfg.scheme = parse_scheme(c["scheme"].get<std::string>());
    cfg.activation = parse_activation(c["activation"].get<std::string>());
    cfg.seq_len = c["k"].get<std::size_t>();
    cfg.dataset_size = c["n"].get<std::size_t>();
    cfg.batch_size = c["batch_size"].get<std::size_t>();
    cfg.lr = c["lr"].get<double>();
    const auto opt = c["optimizer"].get<std::string>();
    if (opt == "sgd") cfg.optimizer = OptimizerKind::SGD;
    else if (opt == "adam") cfg.optimizer = OptimizerKind::Adam;
    else throw ConfigError("optimizer must be sgd or adam");
    cfg.adam_beta1 = c["adam_beta1"].get<double>();
    cfg.adam_beta2 = c["adam_beta2"].get<double>();
    cfg.adam_eps = c["adam_eps"].get<double>();
    cfg.epochs = c["epochs"].get<std::size_t>();
    cfg.max_steps = c["max_steps"].get<std::size_t>();
    cfg.seed = c["seed"].get<std::uint64_t>();
    const auto loss = c["loss"].get<std::string>();
    if (loss == "mse") cfg.loss = LossKind::MSE;
    else if (loss == "l1_kernel") cfg.loss = LossKind::L1Kernel;
    else throw ConfigError("loss must be mse or l1_kernel");
    cfg.dt = c["dt"].get<double>();
    cfg.train_bias = c["train_bias"].get<bool>();
    if (!c["init_low"].is_null()) cfg.init_low = c["init_low"].get<double>();
    if (!c["init_high"].is_null()) cfg.init_high = c["init_high"].get<double>();
    if (!c["warm_start"].is_null()) {
        const fs::path p = c["warm_start"].get<std::string>();
        cfg.warm_start = load_checkpoint(p);
        run.inputs.push_back(p);
    }
    cfg.workers = run.workers;
    return cfg;
}

int cmd_train(Run& run, std::ostream& out, std::ostream& err) {
    TrainConfig cfg = train_config_from(run.config, run);
    std::optional<Dataset> data;
    if (!run.config["dataset"].is_null()) {
        const fs::path p = run.config["dataset"].get<std::string>();
        data = read_dataset_csv(p);
        run.inputs.push_back(p);
        run.config["n"] = data->size;
        run.config["k"] = data->seq_len;
        cfg.dataset_size = data->size;
        cfg.seq_len = data->seq_len;
    }
    validate(cfg);

    const fs::path dir = run.config["out_dir"].get<std::string>();
    const fs::path checkpoint = dir / "checkpoint.json", telemetry = dir / "telemetry.csv",
                   manifest = dir / "manifest.json";
    claim_output(run, checkpoint);
    claim_output(run, telemetry);
    claim_output(run, manifest);
    run.outputs.pop_back();

    auto tel = open_output(telemetry);
    write_telemetry_header(tel);
    const TelemetrySink sink = [&](const TelemetryRecord& r) { write_telemetry_row(tel, r); };
    const TrainResult result = data ? train(cfg, *data, sink) : train(cfg, sink);
    tel.close();
    save_checkpoint(checkpoint, result.params);

    const bool diverged = result.status == TrainStatus::Diverged;
    run.extra["status"] = diverged ? "diverged" : "completed";
    run.extra["diverged_step"] = result.diverged_step ? json(*result.diverged_step) : json(nullptr);
    run.extra["steps"] = result.telemetry.size();
    run.extra["warnings"] = result.warnings;
    write_manifest(run, manifest);
    for (const auto& w : result.warnings) err << "warning: " << w << '\n';
    if (diverged) {
        err << "training diverged at step " << *result.diverged_step << "; telemetry kept in " << telemetry.string()
            << '\n';
        return kDiverged;
    }
    const double final_loss = result.telemetry.empty() ? std::nan("") : result.telemetry.back().loss;
    out << "trained " << result.telemetry.size() << " steps, last loss " << format_double(final_loss) << ", wrote "
        << dir.string() << '\n';
    return kOk;
}

int cmd_perturb(Run& run, std::ostream& out) {
    const json& c = run.config;
    PerturbConfig pc;
    pc.betas = parse_beta_grid(c["betas"].get<std::string>());
    pc.samples_per_beta = c["samples_per_beta"].get<std::size_t>();
    pc.perturb_set = parse_perturb_set(c["perturb_set"].get<std::string>());
    pc.metric = parse_metric(c["metric"].get<std::string>());
    pc.space = parse_perturb_space(c["space"].get<std::string>());
    pc.seed = c["seed"].get<std::uint64_t>();
    pc.window_steps = c["window_steps"].get<std::size_t>();
    pc.probe_count = c["probe_count"].get<std::size_t>();
    pc.workers = run.workers;
    validate(pc);
    const auto target = parse_kernel_spec(c["target"].get<std::string>());
    note_kernel_input(run, c["target"]);

    std::vector<SSMParams> checkpoints;
    std::vector<std::string> ids;
    for (const auto& p : c["checkpoints"]) {
        const fs::path path = p.get<std::string>();
        checkpoints.push_back(load_checkpoint(path));
        run.inputs.push_back(path);
        ids.push_back(git_blob_sha1(read_file(path)));
    }
    const fs::path path = c["out"].get<std::string>();
    const fs::path manifest = manifest_beside(path);
    claim_output(run, path);
    claim_output(run, manifest);
    run.outputs.pop_back();

    const auto report = sweep(checkpoints, target, pc, ids);
    {
        auto file = open_output(path);
        write_report_csv(file, report);
    }
    json crossings = json::array();
    for (const auto& x : report.crossings) {
        crossings.push_back({{"m", x.m}, {"next_m", x.next_m}, {"beta", x.beta ? json(*x.beta) : json(nullptr)}});
    }
    run.extra["metric"] = report.metric;
    run.extra["checkpoint_ids"] = report.checkpoint_ids;
    run.extra["crossings"] = crossings;
    run.extra["envelope_corrections"] = report.envelope_corrections;
    write_manifest(run, manifest);
    out << "wrote " << path.string() << " (" << report.rows.size() << " rows)\n";
    for (const auto& x : report.crossings) {
        out << "crossing m=" << x.m << " -> m=" << x.next_m << ": "
            << (x.beta ? format_double(*x.beta) : std::string("none")) << '\n';
    }
    return kOk;
}

std::vector<double> w_grid(const json& c) {
    const double lo = c["w_min"].get<double>(), hi = c["w_max"].get<double>(), step = c["w_step"].get<double>();
    if (!(step > 0.0) || !(hi >= lo)) throw ConfigError("w grid needs w_step > 0 and w_max >= w_min");
    const auto count = static_cast<std::size_t>(std::floor((hi - lo) / step + 1e-9)) + 1;
    std::vector<double> grid;
    for (std::size_t j = 0; j < count; ++j) grid.push_back(std::round((lo + static_cast<double>(j) * step) * 1e12) / 1e12);
    return grid;
}

int cmd_gradscale(Run& run, std::ostream& out) {
    const json& c = run.config;
    std::vector<Scheme> schemes;
    for (const auto& s : c["schemes"]) schemes.push_back(parse_scheme(s.get<std::string>()));
    const auto grid = w_grid(c);
    const fs::path path = c["out"].get<std::string>();
    const fs::path manifest = manifest_beside(path);
    claim_output(run, path);
    claim_output(run, manifest);
    run.outputs.pop_back();

    auto file = open_output(path);
    file << "scheme,w,gf,gf_over_absw,flag\n";
    std::size_t rows = 0;
    for (const auto& scheme : schemes) {
        const std::string name = to_string(scheme);
        const std::string quoted = name.find(',') == std::string::npos ? name : '"' + name + '"';
        for (double w : grid) {
            std::vector<std::string> flags;
            std::optional<double> gf;
            try {
                gf = tabulated_gradient_scale(scheme, w);
                if (!gf) {
                    flags.push_back("no_closed_form");
                    gf = gradient_scale(scheme, w);
                }
            } catch (const DomainError&) {
                gf.reset();
                flags.push_back("singular");
            }
            std::string ratio;
            if (w == 0.0) flags.push_back("w_zero");
            else if (gf) ratio = format_double(*gf / std::abs(w));
            std::string flag;
            for (const auto& f : flags) flag += (flag.empty() ? "" : ";") + f;
            file << quoted << ',' << format_double(w) << ',' << (gf ? format_double(*gf) : "") << ',' << ratio << ','
                 << flag << '\n';
            ++rows;
        }
    }
    file.close();
    write_manifest(run, manifest);
    out << "wrote " << path.string() << " (" << rows << " rows)\n";
    return kOk;
}

int cmd_verify(Run& run, std::ostream& out) {
    const json& c = run.config;
    std::vector<Scheme> schemes;
    for (const auto& s : c["schemes"]) {
        schemes.push_back(parse_scheme(s.get<std::string>()));
        if (schemes.back().mode != TimeMode::Continuous)
            throw ConfigError("verify checks continuous-time schemes only: " + s.get<std::string>());
    }
    std::vector<double> betas = c["betas"].get<std::vector<double>>();
    for (double b : betas) {
        if (!(b > 0.0)) throw ConfigError("verify: betas must be positive");
    }
    const auto grid = w_grid(c);

    std::ostringstream report;
    bool all_ok = true;
    auto line = [&](bool ok, const std::string& what, const std::string& detail) {
        all_ok = all_ok && ok;
        report << (ok ? "PASS " : "FAIL ") << what << ": " << detail << '\n';
    };

    for (const auto& scheme : schemes) {
        const std::string name = to_string(scheme);
        const bool certified = scheme.family == Family::Exp || scheme.family == Family::Softplus ||
                               scheme.family == Family::Best;
        if (certified) {
            std::size_t checked = 0, failed = 0;
            double worst = -std::numeric_limits<double>::infinity();
            for (double w : grid) {
                for (double beta : betas) {
                    const double gap = stability_gap(scheme, w, beta);
                    const double g = stability_bound_g(scheme, w, beta);
                    ++checked;
                    worst = std::max(worst, gap - g);
                    if (!(gap <= g + 1e-9)) ++failed;
                }
            }
            line(failed == 0, "certificate " + name,
                 std::to_string(checked) + " points, max(gap - g) = " + format_double(worst));
        }
        if (scheme.family == Family::Direct) {
            std::size_t failed = 0;
            double worst = 0.0;
            for (double beta : betas) {
                for (double eps : {1.0, 0.1, 0.01}) {
                    const double gap = stability_gap(scheme, -beta * (1.0 + eps), beta);
                    const double rel = std::abs(gap * eps - 1.0);
                    worst = std::max(worst, rel);
                    if (!(rel <= 1e-6)) ++failed;
                }
            }
            line(failed == 0, "instability " + name, "max relative error of gap vs 1/eps = " + format_double(worst));
        }
        // The sup over the ball sits at an endpoint.
        std::size_t checked = 0, failed = 0, skipped = 0;
        double worst = -std::numeric_limits<double>::infinity();
        for (double w : grid) {
            for (double beta : betas) {
                double gap = 0.0, lam = 0.0;
                try {
                    lam = apply(scheme, w);
                    if (!(lam < 0.0)) throw DomainError("unstable centre");
                    gap = stability_gap(scheme, w, beta);
                } catch (const DomainError&) {
                    ++skipped;
                    continue;
                }
                ++checked;
                for (int j = 0; j <= 100; ++j) {
                    const double v = w - beta + 2.0 * beta * j / 100.0;
                    double lv = 0.0;
                    try {
                        lv = apply(scheme, v);
                    } catch (const DomainError&) {
                        lv = 0.0;
                    }
                    const double value = lv < 0.0 ? std::abs(lam / lv - 1.0) : std::numeric_limits<double>::infinity();
                    if (std::isinf(gap)) continue;
                    worst = std::max(worst, value - gap);
                    if (!(value <= gap + 1e-12)) {
                        ++failed;
                        break;
                    }
                }
            }
        }
        line(failed == 0, "endpoint sup " + name,
             std::to_string(checked) + " balls, " + std::to_string(skipped) + " skipped (unstable centre), max excess " +
                 format_double(worst));
    }
    out << report.str();
    if (!c["out"].is_null()) {
        const fs::path path = c["out"].get<std::string>();
        const fs::path manifest = manifest_beside(path);
        claim_output(run, path);
        claim_output(run, manifest);
        run.outputs.pop_back();
        auto file = open_output(path);
        file << report.str();
        file.close();
        run.extra["passed"] = all_ok;
        write_manifest(run, manifest);
    }
    return all_ok ? kOk : kVerifyFailed;
}

std::string keys_footer(const std::string& command) {
    std::ostringstream s;
    s << "Config keys (TOML or JSON file via --config, or --<key> on the command line):\n";
    for (const auto& key : keys_for(command)) {
        s << "  " << std::left << std::setw(18) << key.name << std::setw(11) << kind_label(key.kind) << key.help;
        if (key.required) s << " [required]";
        else if (!key.fallback.is_null()) s << " [default: " << key.fallback.dump() << "]";
        s << '\n';
    }
    s << "Exit codes: 0 ok, 1 diverged, 2 usage, 3 verification failed.";
    return s.str();
}

} // namespace

std::string git_blob_sha1(const std::string& content) {
    const std::string header = "blob " + std::to_string(content.size()) + '\0';
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    EVP_DigestInit_ex(ctx, EVP_sha1(), nullptr);
    EVP_DigestUpdate(ctx, header.data(), header.size());
    EVP_DigestUpdate(ctx, content.data(), content.size());
    EVP_DigestFinal_ex(ctx, digest, &len);
    EVP_MD_CTX_free(ctx);
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return hex.str();
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"ssmlab: state-space model memory and reparameterization lab"};
    app.require_subcommand(1);
    const std::vector<std::pair<std::string, std::string>> commands = {
        {"gen-data", "generate a synthetic dataset from a target kernel"},
        {"train", "train an SSM and stream telemetry"},
        {"perturb", "perturbation-error sweep over checkpoints"},
        {"gradscale", "tabulate gradient-scale functions"},
        {"verify", "check the stability certificates of reparameterizations"},
    };
    std::map<std::string, Options> options;
    for (const auto& [name, desc] : commands) {
        auto* sub = app.add_subcommand(name, desc);
        Options& o = options[name];
        sub->add_option("-c,--config", o.config_path, "TOML or JSON config file (a run manifest also works)");
        sub->add_option("--workers", o.workers, "worker threads")->check(CLI::PositiveNumber);
        sub->add_flag("--force", o.force, "overwrite existing outputs");
        for (const auto& key : keys_for(name)) {
            auto* opt = sub->add_option("--" + key.name, o.values[key.name], key.help);
            opt->type_name(kind_label(key.kind));
            const bool list = key.kind == Kind::StringList || key.kind == Kind::FloatList;
            if (!list) opt->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
            opt->allow_extra_args(list);
        }
        sub->footer(keys_footer(name));
    }

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kOk : kUsage;
    }

    for (const auto& [name, desc] : commands) {
        if (!app.got_subcommand(name)) continue;
        const Options& o = options[name];
        try {
            Run run;
            run.command = name;
            run.workers = o.workers;
            run.force = o.force;
            run.config = resolve_config(name, o);
            if (name == "gen-data") return cmd_gen_data(run, out);
            if (name == "train") return cmd_train(run, out, err);
            if (name == "perturb") return cmd_perturb(run, out);
            if (name == "gradscale") return cmd_gradscale(run, out);
            return cmd_verify(run, out);
        } catch (const ConfigError& e) {
            err << "error: " << e.what() << '\n';
            return kUsage;
        } catch (const ContractError& e) {
            err << "error: " << e.what() << '\n';
            return kUsage;
        } catch (const NumericError& e) {
            err << "numeric failure: " << e.what() << '\n';
            return kDiverged;
        } catch (const DomainError& e) {
            err << "error: " << e.what() << '\n';
            return kUsage;
        } catch (const fs::filesystem_error& e) {
            err << "error: " << e.what() << '\n';
            return kUsage;
        } catch (const nlohmann::json::exception& e) {
            err << "error: " << e.what() << '\n';
            return kUsage;
        }
    }
    return kUsage;
}

} // namespace ssmlab::cli
