#include "fdsim/config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "fdsim/errors.hpp"

namespace fdsim {

Mode parse_mode(const std::string& name) {
    if (name == "feddecomp") return Mode::FedDecomp;
    if (name == "fedavg") return Mode::FedAvg;
    if (name == "local") return Mode::Local;
    if (name == "local-lowrank") return Mode::LocalLowRank;
    if (name == "fedavg-lowrank") return Mode::FedAvgLowRank;
    if (name == "simultaneous") return Mode::Simultaneous;
    if (name == "feddecomp-reverse") return Mode::FedDecompReverse;
    if (name == "fedper") return Mode::FedPer;
    throw ValidationError("unknown mode '" + name + "'");
}

std::string mode_name(Mode mode) {
    switch (mode) {
        case Mode::FedDecomp: return "feddecomp";
        case Mode::FedAvg: return "fedavg";
        case Mode::Local: return "local";
        case Mode::LocalLowRank: return "local-lowrank";
        case Mode::FedAvgLowRank: return "fedavg-lowrank";
        case Mode::Simultaneous: return "simultaneous";
        case Mode::FedDecompReverse: return "feddecomp-reverse";
        case Mode::FedPer: return "fedper";
    }
    throw ContractError("unreachable mode");
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

struct Parser {
    ExperimentConfig cfg;
    std::string origin;
    int line = 0;

    [[noreturn]] void fail(const std::string& key, const std::string& what) const {
        throw ValidationError(origin + ":" + std::to_string(line) + ": key '" + key +
                              "': " + what);
    }

    std::size_t to_size(const std::string& key, const std::string& v) const {
        try {
            std::size_t pos = 0;
            const long long parsed = std::stoll(v, &pos);
            if (pos != v.size() || parsed < 0) throw std::invalid_argument(v);
            return static_cast<std::size_t>(parsed);
        } catch (const std::exception&) {
            fail(key, "expected a non-negative integer, got '" + v + "'");
        }
    }

    std::uint64_t to_u64(const std::string& key, const std::string& v) const {
        try {
            std::size_t pos = 0;
            const unsigned long long parsed = std::stoull(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return parsed;
        } catch (const std::exception&) {
            fail(key, "expected an unsigned integer, got '" + v + "'");
        }
    }

    double to_double(const std::string& key, const std::string& v) const {
        try {
            std::size_t pos = 0;
            const double parsed = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return parsed;
        } catch (const std::exception&) {
            fail(key, "expected a number, got '" + v + "'");
        }
    }

    bool to_bool(const std::string& key, const std::string& v) const {
        if (v == "true" || v == "1" || v == "on") return true;
        if (v == "false" || v == "0" || v == "off") return false;
        fail(key, "expected true/false, got '" + v + "'");
    }

    void apply(const std::string& key, const std::string& value) {
        if (key == "mode") {
            try {
                cfg.mode = parse_mode(value);
            } catch (const ValidationError& e) {
                fail(key, e.what());
            }
        } else if (key == "clients") {
            cfg.clients = to_size(key, value);
        } else if (key == "rounds") {
            cfg.rounds = to_size(key, value);
        } else if (key == "epochs") {
            cfg.epochs = to_size(key, value);
        } else if (key == "epochs_lora") {
            cfg.epochs_lora = to_size(key, value);
        } else if (key == "rank_ratio_fc") {
            cfg.rank_ratio_fc = to_double(key, value);
        } else if (key == "rank_ratio_conv") {
            cfg.rank_ratio_conv = to_double(key, value);
        } else if (key == "alpha") {
            cfg.alpha = to_double(key, value);
        } else if (key == "lr") {
            cfg.lr = to_double(key, value);
        } else if (key == "batch_size") {
            cfg.batch_size = to_size(key, value);
        } else if (key == "participation") {
            cfg.participation = to_double(key, value);
        } else if (key == "dataset") {
            if (value != "synthetic" && value != "idx") {
                fail(key, "expected synthetic or idx, got '" + value + "'");
            }
            cfg.dataset = value;
        } else if (key == "synth_classes") {
            cfg.synth_classes = to_size(key, value);
        } else if (key == "synth_dim") {
            cfg.synth_dim = to_size(key, value);
        } else if (key == "synth_per_class") {
            cfg.synth_per_class = to_size(key, value);
        } else if (key == "synth_separation") {
            cfg.synth_separation = to_double(key, value);
        } else if (key == "train_per_client") {
            cfg.train_per_client = to_size(key, value);
        } else if (key == "test_per_client") {
            cfg.test_per_client = to_size(key, value);
        } else if (key == "idx_images") {
            cfg.idx_images = value;
        } else if (key == "idx_labels") {
            cfg.idx_labels = value;
        } else if (key == "model") {
            if (value != "mlp" && value != "cnn") {
                fail(key, "expected mlp or cnn, got '" + value + "'");
            }
            cfg.model = value;
        } else if (key == "seed") {
            cfg.seed = to_u64(key, value);
        } else if (key == "out_dir") {
            cfg.out_dir = value;
        } else if (key == "measure_time") {
            cfg.measure_time = to_bool(key, value);
        } else {
            throw ValidationError(origin + ":" + std::to_string(line) + ": unknown key '" +
                                  key + "'");
        }
    }
};

}  // namespace

ExperimentConfig parse_config_text(const std::string& text, const std::string& origin) {
    Parser parser;
    parser.origin = origin;
    std::istringstream is(text);
    std::string raw;
    while (std::getline(is, raw)) {
        ++parser.line;
        const auto hash = raw.find('#');
        if (hash != std::string::npos) raw = raw.substr(0, hash);
        const std::string stripped = trim(raw);
        if (stripped.empty()) continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos) {
            throw ValidationError(origin + ":" + std::to_string(parser.line) +
                                  ": expected 'key = value', got '" + stripped + "'");
        }
        parser.apply(trim(stripped.substr(0, eq)), trim(stripped.substr(eq + 1)));
    }
    validate_config(parser.cfg);
    return parser.cfg;
}

ExperimentConfig parse_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config file " + path);
    std::ostringstream buf;
    buf << is.rdbuf();
    return parse_config_text(buf.str(), path);
}

void validate_config(const ExperimentConfig& cfg) {
    if (cfg.clients < 1) throw ValidationError("key 'clients' must be >= 1");
    if (cfg.epochs_lora > cfg.epochs) {
        throw ValidationError("key 'epochs_lora' (" + std::to_string(cfg.epochs_lora) +
                              ") exceeds key 'epochs' (" + std::to_string(cfg.epochs) + ")");
    }
    if (!(cfg.rank_ratio_fc > 0.0) || cfg.rank_ratio_fc > 1.0) {
        throw ValidationError("key 'rank_ratio_fc' must lie in (0, 1]");
    }
    if (!(cfg.rank_ratio_conv > 0.0) || cfg.rank_ratio_conv > 1.0) {
        throw ValidationError("key 'rank_ratio_conv' must lie in (0, 1]");
    }
    if (!(cfg.alpha > 0.0)) throw ValidationError("key 'alpha' must be positive");
    if (cfg.lr < 0.0) throw ValidationError("key 'lr' must be >= 0");
    if (cfg.batch_size < 1) throw ValidationError("key 'batch_size' must be >= 1");
    if (!(cfg.participation > 0.0) || cfg.participation > 1.0) {
        throw ValidationError("key 'participation' must lie in (0, 1]");
    }
    if (cfg.train_per_client < 1) throw ValidationError("key 'train_per_client' must be >= 1");
    if (cfg.test_per_client < 1) throw ValidationError("key 'test_per_client' must be >= 1");
    if (cfg.dataset == "synthetic") {
        if (cfg.synth_classes < 2) throw ValidationError("key 'synth_classes' must be >= 2");
        if (cfg.synth_dim < 2) throw ValidationError("key 'synth_dim' must be >= 2");
        if (cfg.synth_per_class < 1) throw ValidationError("key 'synth_per_class' must be >= 1");
        if (cfg.synth_separation < 0.0) {
            throw ValidationError("key 'synth_separation' must be >= 0");
        }
        if (cfg.model == "cnn") {
            throw ValidationError("key 'model': cnn requires an idx dataset "
                                  "(key 'dataset' is synthetic)");
        }
    } else {
        if (cfg.idx_images.empty()) throw ValidationError("key 'idx_images' is required");
        if (cfg.idx_labels.empty()) throw ValidationError("key 'idx_labels' is required");
    }
}

std::string emit_config(const ExperimentConfig& cfg) {
    std::ostringstream os;
    os.precision(17);
    os << "mode = " << mode_name(cfg.mode) << "\n";
    os << "clients = " << cfg.clients << "\n";
    os << "rounds = " << cfg.rounds << "\n";
    os << "epochs = " << cfg.epochs << "\n";
    os << "epochs_lora = " << cfg.epochs_lora << "\n";
    os << "rank_ratio_fc = " << cfg.rank_ratio_fc << "\n";
    os << "rank_ratio_conv = " << cfg.rank_ratio_conv << "\n";
    os << "alpha = " << cfg.alpha << "\n";
    os << "lr = " << cfg.lr << "\n";
    os << "batch_size = " << cfg.batch_size << "\n";
    os << "participation = " << cfg.participation << "\n";
    os << "dataset = " << cfg.dataset << "\n";
    os << "synth_classes = " << cfg.synth_classes << "\n";
    os << "synth_dim = " << cfg.synth_dim << "\n";
    os << "synth_per_class = " << cfg.synth_per_class << "\n";
    os << "synth_separation = " << cfg.synth_separation << "\n";
    os << "train_per_client = " << cfg.train_per_client << "\n";
    os << "test_per_client = " << cfg.test_per_client << "\n";
    if (!cfg.idx_images.empty()) os << "idx_images = " << cfg.idx_images << "\n";
    if (!cfg.idx_labels.empty()) os << "idx_labels = " << cfg.idx_labels << "\n";
    os << "model = " << cfg.model << "\n";
    os << "seed = " << cfg.seed << "\n";
    os << "out_dir = " << cfg.out_dir << "\n";
    os << "measure_time = " << (cfg.measure_time ? "true" : "false") << "\n";
    return os.str();
}

std::uint64_t config_digest(const ExperimentConfig& cfg) {
    const std::string text = emit_config(cfg);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

}  // namespace fdsim
