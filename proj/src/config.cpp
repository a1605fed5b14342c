#include "sparsekd/config.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace sparsekd {

namespace {

std::string trim(const std::string& s) {
    const auto a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    const auto b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

[[noreturn]] void fail(const std::string& origin, int line, const std::string& what) {
    throw ConfigError(origin + ":" + std::to_string(line) + ": " + what);
}

std::int64_t to_int(const ConfigFile& f, const std::string& key) {
    const auto& s = f.raw(key);
    try {
        std::size_t pos = 0;
        const long long v = std::stoll(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": '" + s + "' is not an integer");
    }
}

double to_double(const ConfigFile& f, const std::string& key) {
    const auto& s = f.raw(key);
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config key " + key + ": '" + s + "' is not a number");
    }
}

bool to_bool(const ConfigFile& f, const std::string& key) {
    const auto& s = f.raw(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("config key " + key + ": '" + s + "' is not a boolean");
}

std::vector<std::int64_t> to_int_list(const ConfigFile& f, const std::string& key) {
    const auto& s = f.raw(key);
    std::vector<std::int64_t> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) {
        part = trim(part);
        if (part.empty()) throw ConfigError("config key " + key + ": empty list element in '" + s + "'");
        try {
            out.push_back(std::stoll(part));
        } catch (const std::exception&) {
            throw ConfigError("config key " + key + ": '" + part + "' is not an integer");
        }
    }
    if (out.empty()) throw ConfigError("config key " + key + ": empty list");
    return out;
}

}  // namespace

const std::string& ConfigFile::raw(const std::string& key) const {
    auto it = values.find(key);
    if (it == values.end()) throw ConfigError("missing config key " + key);
    return it->second;
}

ConfigFile parse_config_text(const std::string& text, const std::string& origin) {
    ConfigFile f;
    std::stringstream ss(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']') fail(origin, lineno, "unterminated section header '" + line + "'");
            section = trim(line.substr(1, line.size() - 2));
            if (section.empty()) fail(origin, lineno, "empty section name");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) fail(origin, lineno, "expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) fail(origin, lineno, "empty key");
        if (section.empty()) fail(origin, lineno, "key '" + key + "' outside any [section]");
        const std::string full = section + "." + key;
        if (f.values.count(full)) fail(origin, lineno, "duplicate key '" + full + "'");
        f.values[full] = value;
        f.lines[full] = lineno;
    }
    return f;
}

ConfigFile parse_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str(), path);
}

DistillConfig DistillConfig::from_file(const std::string& path) { return from_config(parse_config_file(path)); }

DistillConfig DistillConfig::from_config(const ConfigFile& f) {
    DistillConfig c;
    // Reject unknown keys so typos fail loudly with their line number.
    static const char* known[] = {
        "run.seed",          "run.epochs",        "run.warmup_epochs", "run.batch",        "run.checkpoint_every",
        "run.out_dir",       "data.dir",          "data.aug_crop",     "data.aug_flip",    "data.aug_jitter",
        "student.image_size", "student.widths",   "student.blocks",    "student.head_dim", "teacher.kind",
        "teacher.patch",     "teacher.dim",       "teacher.depth",     "teacher.heads",    "teacher.seed",
        "teacher.export",    "mask.ratio",        "queue.capacity",    "queue.tau",        "queue.sim_mode",
        "loss.w_sim",        "loss.w_feat",       "optim.lr",          "optim.momentum",   "optim.weight_decay",
        "optim.clip_norm",   "optim.trust_ratio", "arms.sparse",       "arms.unet",
    };
    for (const auto& [key, value] : f.values) {
        if (std::find_if(std::begin(known), std::end(known), [&](const char* k) { return key == k; }) ==
            std::end(known)) {
            auto it = f.lines.find(key);
            throw ConfigError("unknown config key '" + key + "'" +
                              (it != f.lines.end() ? " at line " + std::to_string(it->second) : ""));
        }
    }
    auto geti = [&](const char* k, std::int64_t d) { return f.has(k) ? to_int(f, k) : d; };
    auto getd = [&](const char* k, double d) { return f.has(k) ? to_double(f, k) : d; };
    auto getb = [&](const char* k, bool d) { return f.has(k) ? to_bool(f, k) : d; };
    auto gets = [&](const char* k, const std::string& d) { return f.has(k) ? f.raw(k) : d; };

    c.seed = static_cast<std::uint64_t>(geti("run.seed", static_cast<std::int64_t>(c.seed)));
    c.epochs = geti("run.epochs", c.epochs);
    c.warmup_epochs = geti("run.warmup_epochs", c.warmup_epochs);
    c.batch = geti("run.batch", c.batch);
    c.checkpoint_every = geti("run.checkpoint_every", c.checkpoint_every);
    c.out_dir = gets("run.out_dir", c.out_dir);
    c.data_dir = gets("data.dir", c.data_dir);
    c.aug_crop = getb("data.aug_crop", c.aug_crop);
    c.aug_flip = getb("data.aug_flip", c.aug_flip);
    c.aug_jitter = getb("data.aug_jitter", c.aug_jitter);
    c.image_size = geti("student.image_size", c.image_size);
    if (f.has("student.widths")) c.widths = to_int_list(f, "student.widths");
    c.blocks = geti("student.blocks", c.blocks);
    c.head_dim = geti("student.head_dim", c.head_dim);
    c.teacher_kind = gets("teacher.kind", c.teacher_kind);
    c.teacher_patch = geti("teacher.patch", c.teacher_patch);
    c.teacher_dim = geti("teacher.dim", c.teacher_dim);
    c.teacher_depth = geti("teacher.depth", c.teacher_depth);
    c.teacher_heads = geti("teacher.heads", c.teacher_heads);
    c.teacher_seed = static_cast<std::uint64_t>(geti("teacher.seed", static_cast<std::int64_t>(c.teacher_seed)));
    c.teacher_export = gets("teacher.export", c.teacher_export);
    c.mask_ratio = getd("mask.ratio", c.mask_ratio);
    c.queue_capacity = geti("queue.capacity", c.queue_capacity);
    c.tau = getd("queue.tau", c.tau);
    c.sim_mode = gets("queue.sim_mode", c.sim_mode);
    c.w_sim = getd("loss.w_sim", c.w_sim);
    c.w_feat = getd("loss.w_feat", c.w_feat);
    c.lr = getd("optim.lr", c.lr);
    c.momentum = getd("optim.momentum", c.momentum);
    c.weight_decay = getd("optim.weight_decay", c.weight_decay);
    c.clip_norm = getd("optim.clip_norm", c.clip_norm);
    c.trust_ratio = getb("optim.trust_ratio", c.trust_ratio);
    c.arm_sparse = getb("arms.sparse", c.arm_sparse);
    c.arm_unet = getb("arms.unet", c.arm_unet);
    c.validate();
    return c;
}

void DistillConfig::validate() const {
    if (epochs < 1) throw ConfigError("run.epochs must be >= 1, got " + std::to_string(epochs));
    if (warmup_epochs < 0 || warmup_epochs >= epochs)
        throw ConfigError("run.warmup_epochs " + std::to_string(warmup_epochs) + " must be in [0, epochs=" +
                          std::to_string(epochs) + ")");
    if (batch < 1) throw ConfigError("run.batch must be >= 1");
    if (checkpoint_every < 0) throw ConfigError("run.checkpoint_every must be >= 0");
    if (image_size < 32 || image_size % 32 != 0)
        throw ConfigError("student.image_size " + std::to_string(image_size) + " must be a positive multiple of 32");
    if (widths.size() != 4) throw ConfigError("student.widths needs exactly 4 entries");
    for (auto w : widths)
        if (w < 1) throw ConfigError("student.widths entries must be positive");
    if (blocks < 1) throw ConfigError("student.blocks must be >= 1");
    if (head_dim < 1) throw ConfigError("student.head_dim must be >= 1");
    if (teacher_kind != "toy" && teacher_kind != "file")
        throw ConfigError("teacher.kind must be 'toy' or 'file', got '" + teacher_kind + "'");
    if (teacher_kind == "file" && teacher_export.empty())
        throw ConfigError("teacher.kind=file requires teacher.export");
    if (teacher_kind == "toy" && head_dim != teacher_dim)
        throw ConfigError("student.head_dim " + std::to_string(head_dim) + " must equal teacher.dim " +
                          std::to_string(teacher_dim));
    if (teacher_patch < 1 || image_size % teacher_patch != 0)
        throw ConfigError("teacher.patch " + std::to_string(teacher_patch) + " must divide image size " +
                          std::to_string(image_size));
    if (!(mask_ratio >= 0.0) || mask_ratio > 1.0)
        throw ConfigError("mask.ratio " + std::to_string(mask_ratio) + " outside [0,1]");
    if (queue_capacity < batch)
        throw ConfigError("queue.capacity " + std::to_string(queue_capacity) + " must be >= batch " +
                          std::to_string(batch));
    if (!(tau > 0.0)) throw ConfigError("queue.tau must be > 0");
    if (sim_mode != "consistent" && sim_mode != "as-written")
        throw ConfigError("queue.sim_mode must be 'consistent' or 'as-written', got '" + sim_mode + "'");
    if (!(lr > 0.0)) throw ConfigError("optim.lr must be > 0");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("optim.momentum must be in [0,1)");
    if (weight_decay < 0.0) throw ConfigError("optim.weight_decay must be >= 0");
    if (w_sim < 0.0 || w_feat < 0.0) throw ConfigError("loss weights must be >= 0");
}

std::string DistillConfig::canonical_text() const {
    std::ostringstream o;
    auto d2s = [](double v) {
        std::ostringstream s;
        s.precision(17);
        s << v;
        return s.str();
    };
    o << "[run]\n";
    o << "seed = " << seed << "\n";
    o << "epochs = " << epochs << "\n";
    o << "warmup_epochs = " << warmup_epochs << "\n";
    o << "batch = " << batch << "\n";
    o << "checkpoint_every = " << checkpoint_every << "\n";
    o << "out_dir = " << out_dir << "\n";
    o << "[data]\n";
    o << "dir = " << data_dir << "\n";
    o << "aug_crop = " << (aug_crop ? "true" : "false") << "\n";
    o << "aug_flip = " << (aug_flip ? "true" : "false") << "\n";
    o << "aug_jitter = " << (aug_jitter ? "true" : "false") << "\n";
    o << "[student]\n";
    o << "image_size = " << image_size << "\n";
    o << "widths = ";
    for (std::size_t i = 0; i < widths.size(); ++i) o << (i ? "," : "") << widths[i];
    o << "\n";
    o << "blocks = " << blocks << "\n";
    o << "head_dim = " << head_dim << "\n";
    o << "[teacher]\n";
    o << "kind = " << teacher_kind << "\n";
    o << "patch = " << teacher_patch << "\n";
    o << "dim = " << teacher_dim << "\n";
    o << "depth = " << teacher_depth << "\n";
    o << "heads = " << teacher_heads << "\n";
    o << "seed = " << teacher_seed << "\n";
    o << "export = " << teacher_export << "\n";
    o << "[mask]\n";
    o << "ratio = " << d2s(mask_ratio) << "\n";
    o << "[queue]\n";
    o << "capacity = " << queue_capacity << "\n";
    o << "tau = " << d2s(tau) << "\n";
    o << "sim_mode = " << sim_mode << "\n";
    o << "[loss]\n";
    o << "w_sim = " << d2s(w_sim) << "\n";
    o << "w_feat = " << d2s(w_feat) << "\n";
    o << "[optim]\n";
    o << "lr = " << d2s(lr) << "\n";
    o << "momentum = " << d2s(momentum) << "\n";
    o << "weight_decay = " << d2s(weight_decay) << "\n";
    o << "clip_norm = " << d2s(clip_norm) << "\n";
    o << "trust_ratio = " << (trust_ratio ? "true" : "false") << "\n";
    o << "[arms]\n";
    o << "sparse = " << (arm_sparse ? "true" : "false") << "\n";
    o << "unet = " << (arm_unet ? "true" : "false") << "\n";
    return o.str();
}

std::uint64_t DistillConfig::hash() const {
    const std::string t = canonical_text();
    return fnv1a64(t.data(), t.size());
}

std::vector<std::string> DistillConfig::diff(const DistillConfig& other) const {
    // Compare the canonical serializations line by line; section headers
    // provide the prefix for field names.
    std::vector<std::string> out;
    std::stringstream a(canonical_text()), b(other.canonical_text());
    std::string la, lb, section;
    while (std::getline(a, la) && std::getline(b, lb)) {
        if (!la.empty() && la.front() == '[') {
            section = la.substr(1, la.size() - 2);
            continue;
        }
        if (la == lb) continue;
        const auto eq = la.find(" = ");
        const std::string key = eq == std::string::npos ? la : la.substr(0, eq);
        const std::string va = eq == std::string::npos ? la : la.substr(eq + 3);
        const auto eqb = lb.find(" = ");
        const std::string vb = eqb == std::string::npos ? lb : lb.substr(eqb + 3);
        out.push_back(section + "." + key + ": " + va + " vs " + vb);
    }
    return out;
}

}  // namespace sparsekd
