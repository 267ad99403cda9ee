// Copyright (c) 2026 moe-rebasin authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "rebasin/harness.hpp"
#include "rebasin/lmc.hpp"
#include "rebasin/model.hpp"

namespace rebasin {

inline constexpr int kCheckpointSchemaVersion = 1;

struct CheckpointVersionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckpointFormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct CheckpointShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

namespace detail {

inline constexpr char kB64Alphabet[] =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string base64_encode(const std::vector<std::uint8_t>& bytes) {
    std::string out;
    out.reserve((bytes.size() + 2) / 3 * 4);
    std::size_t i = 0;
    for (; i + 3 <= bytes.size(); i += 3) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8) | bytes[i + 2];
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back(kB64Alphabet[(v >> 6) & 63]);
        out.push_back(kB64Alphabet[v & 63]);
    }
    const std::size_t rem = bytes.size() - i;
    if (rem == 1) {
        const std::uint32_t v = bytes[i] << 16;
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.append("==");
    } else if (rem == 2) {
        const std::uint32_t v = (bytes[i] << 16) | (bytes[i + 1] << 8);
        out.push_back(kB64Alphabet[(v >> 18) & 63]);
        out.push_back(kB64Alphabet[(v >> 12) & 63]);
        out.push_back(kB64Alphabet[(v >> 6) & 63]);
        out.push_back('=');
    }
    return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& text) {
    auto value_of = [](char c) -> int {
        if (c >= 'A' && c <= 'Z') return c - 'A';
        if (c >= 'a' && c <= 'z') return c - 'a' + 26;
        if (c >= '0' && c <= '9') return c - '0' + 52;
        if (c == '+') return 62;
        if (c == '/') return 63;
        return -1;
    };
    if (text.size() % 4 != 0) throw CheckpointFormatError("base64: length not a multiple of 4");
    std::vector<std::uint8_t> out;
    out.reserve(text.size() / 4 * 3);
    for (std::size_t i = 0; i < text.size(); i += 4) {
        int vals[4];
        int pad = 0;
        for (std::size_t k = 0; k < 4; ++k) {
            const char c = text[i + k];
            if (c == '=') {
                if (i + 4 != text.size() || k < 2) throw CheckpointFormatError("base64: bad padding");
                vals[k] = 0;
                ++pad;
            } else {
                if (pad > 0) throw CheckpointFormatError("base64: data after padding");
                vals[k] = value_of(c);
                if (vals[k] < 0) throw CheckpointFormatError("base64: invalid character");
            }
        }
        const std::uint32_t v = (vals[0] << 18) | (vals[1] << 12) | (vals[2] << 6) | vals[3];
        out.push_back((v >> 16) & 0xff);
        if (pad < 2) out.push_back((v >> 8) & 0xff);
        if (pad < 1) out.push_back(v & 0xff);
    }
    return out;
}

/// Doubles as base64 of their little-endian IEEE-754 bytes; exact
/// round-trip regardless of the JSON number formatter.
inline std::string encode_doubles(std::span<const double> values) {
    std::vector<std::uint8_t> bytes;
    bytes.reserve(values.size() * 8);
    for (double d : values) {
        const std::uint64_t bits = std::bit_cast<std::uint64_t>(d);
        for (int shift = 0; shift < 64; shift += 8)
            bytes.push_back(static_cast<std::uint8_t>((bits >> shift) & 0xff));
    }
    return base64_encode(bytes);
}

inline std::vector<double> decode_doubles(const std::string& text) {
    const std::vector<std::uint8_t> bytes = base64_decode(text);
    if (bytes.size() % 8 != 0)
        throw CheckpointFormatError("float array: byte count not a multiple of 8");
    std::vector<double> out(bytes.size() / 8);
    for (std::size_t i = 0; i < out.size(); ++i) {
        std::uint64_t bits = 0;
        for (int k = 7; k >= 0; --k) bits = (bits << 8) | bytes[i * 8 + static_cast<std::size_t>(k)];
        out[i] = std::bit_cast<double>(bits);
    }
    return out;
}

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline const nlohmann::json& require_field(const nlohmann::json& j, const char* key) {
    const auto it = j.find(key);
    if (it == j.end()) throw CheckpointFormatError(std::string("missing field: ") + key);
    return *it;
}

}  // namespace detail

struct Checkpoint {
    MoEParams params;
    std::uint64_t backbone_seed = 0;
    DatasetSpec dataset;
    TrainConfig train;
};

namespace detail {

inline nlohmann::json config_to_json(const MoEConfig& c) {
    return nlohmann::json{{"variant", variant_name(c.variant)}, {"n", c.n},
                          {"d", c.d},                           {"h", c.h},
                          {"top_k", c.top_k},                   {"n_shared", c.n_shared},
                          {"top_k_routed", c.top_k_routed}};
}

inline MoEConfig config_from_json(const nlohmann::json& j) {
    MoEConfig c;
    c.variant = variant_from_name(require_field(j, "variant").get<std::string>());
    c.n = require_field(j, "n").get<std::size_t>();
    c.d = require_field(j, "d").get<std::size_t>();
    c.h = require_field(j, "h").get<std::size_t>();
    c.top_k = require_field(j, "top_k").get<std::size_t>();
    c.n_shared = require_field(j, "n_shared").get<std::size_t>();
    c.top_k_routed = require_field(j, "top_k_routed").get<std::size_t>();
    return c;
}

}  // namespace detail

inline std::string checkpoint_to_json(const Checkpoint& cp) {
    cp.params.validate();
    nlohmann::json j;
    j["schema_version"] = kCheckpointSchemaVersion;
    j["config"] = detail::config_to_json(cp.params.config);
    j["backbone_seed"] = cp.backbone_seed;
    j["gates"] = nlohmann::json::array();
    for (const auto& g : cp.params.gates) {
        j["gates"].push_back({{"W", detail::encode_doubles(g.W)},
                              {"b", detail::encode_doubles(std::span<const double>(&g.b, 1))}});
    }
    j["experts"] = nlohmann::json::array();
    for (const auto& e : cp.params.experts) {
        j["experts"].push_back({{"A", detail::encode_doubles(e.A.data)},
                                {"u", detail::encode_doubles(e.u)},
                                {"B", detail::encode_doubles(e.B.data)},
                                {"v", detail::encode_doubles(e.v)}});
    }
    j["provenance"] = {
        {"dataset",
         {{"kind", "gaussian_blobs"},
          {"classes", cp.dataset.classes},
          {"samples_per_class", cp.dataset.samples_per_class},
          {"input_dim", cp.dataset.input_dim},
          {"noise_sigma", cp.dataset.noise_sigma},
          {"seed", cp.dataset.seed}}},
        {"train",
         {{"steps", cp.train.steps},
          {"batch_size", cp.train.batch_size},
          {"learning_rate", cp.train.learning_rate},
          {"init_seed", cp.train.init_seed},
          {"data_order_seed", cp.train.data_order_seed},
          {"init_scale", cp.train.init_scale}}}};
    return j.dump(2);
}

inline Checkpoint checkpoint_from_json(const std::string& text) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointFormatError(std::string("malformed checkpoint JSON: ") + e.what());
    }
    try {
        const int version = detail::require_field(j, "schema_version").get<int>();
        if (version != kCheckpointSchemaVersion) {
            throw CheckpointVersionError("checkpoint schema version " + std::to_string(version) +
                                         " unsupported; this build reads version " +
                                         std::to_string(kCheckpointSchemaVersion));
        }
        Checkpoint cp;
        cp.params.config = detail::config_from_json(detail::require_field(j, "config"));
        cp.backbone_seed = detail::require_field(j, "backbone_seed").get<std::uint64_t>();
        for (const auto& g : detail::require_field(j, "gates")) {
            GateEntry entry;
            entry.W = detail::decode_doubles(detail::require_field(g, "W").get<std::string>());
            const std::vector<double> b =
                detail::decode_doubles(detail::require_field(g, "b").get<std::string>());
            if (b.size() != 1) throw CheckpointShapeError("gate bias must be a single float");
            entry.b = b[0];
            cp.params.gates.push_back(std::move(entry));
        }
        const std::size_t d = cp.params.config.d;
        const std::size_t h = cp.params.config.h;
        for (const auto& e : detail::require_field(j, "experts")) {
            ExpertParams expert;
            std::vector<double> a =
                detail::decode_doubles(detail::require_field(e, "A").get<std::string>());
            std::vector<double> b =
                detail::decode_doubles(detail::require_field(e, "B").get<std::string>());
            if (a.size() != h * d || b.size() != d * h)
                throw CheckpointShapeError("expert weight array length does not match config");
            expert.A = Matrix(h, d, std::move(a));
            expert.B = Matrix(d, h, std::move(b));
            expert.u = detail::decode_doubles(detail::require_field(e, "u").get<std::string>());
            expert.v = detail::decode_doubles(detail::require_field(e, "v").get<std::string>());
            cp.params.experts.push_back(std::move(expert));
        }
        const auto& prov = detail::require_field(j, "provenance");
        const auto& ds = detail::require_field(prov, "dataset");
        cp.dataset.classes = detail::require_field(ds, "classes").get<std::size_t>();
        cp.dataset.samples_per_class =
            detail::require_field(ds, "samples_per_class").get<std::size_t>();
        cp.dataset.input_dim = detail::require_field(ds, "input_dim").get<std::size_t>();
        cp.dataset.noise_sigma = detail::require_field(ds, "noise_sigma").get<double>();
        cp.dataset.seed = detail::require_field(ds, "seed").get<std::uint64_t>();
        const auto& tr = detail::require_field(prov, "train");
        cp.train.steps = detail::require_field(tr, "steps").get<std::size_t>();
        cp.train.batch_size = detail::require_field(tr, "batch_size").get<std::size_t>();
        cp.train.learning_rate = detail::require_field(tr, "learning_rate").get<double>();
        cp.train.init_seed = detail::require_field(tr, "init_seed").get<std::uint64_t>();
        cp.train.data_order_seed = detail::require_field(tr, "data_order_seed").get<std::uint64_t>();
        cp.train.init_scale = detail::require_field(tr, "init_scale").get<double>();
        try {
            cp.params.validate();
        } catch (const std::invalid_argument& e) {
            throw CheckpointShapeError(std::string("inconsistent checkpoint shapes: ") + e.what());
        }
        for (const auto& g : cp.params.gates)
            if (!all_finite(g.W) || !std::isfinite(g.b))
                throw CheckpointShapeError("checkpoint contains non-finite gate values");
        for (const auto& e : cp.params.experts)
            if (!all_finite(e.A.data) || !all_finite(e.u) || !all_finite(e.B.data) ||
                !all_finite(e.v))
                throw CheckpointShapeError("checkpoint contains non-finite expert values");
        return cp;
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointFormatError(std::string("malformed checkpoint JSON: ") + e.what());
    }
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << text;
    if (!out) throw std::runtime_error("write failed: " + path);
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open for reading: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void save_checkpoint(const std::string& path, const Checkpoint& cp) {
    write_text_file(path, checkpoint_to_json(cp) + "\n");
}

inline Checkpoint load_checkpoint(const std::string& path) {
    return checkpoint_from_json(read_text_file(path));
}

enum class ReportFormat { Json, Csv };

inline ReportFormat format_from_name(const std::string& s) {
    if (s == "json") return ReportFormat::Json;
    if (s == "csv") return ReportFormat::Csv;
    throw std::invalid_argument("unknown report format: " + s);
}

namespace detail {

inline nlohmann::json barrier_report_to_json(const BarrierReport& r) {
    nlohmann::json j;
    j["type"] = "barrier_report";
    j["ts"] = r.curve.ts;
    j["losses"] = r.curve.losses;
    if (r.curve.has_accuracy()) j["accuracies"] = r.curve.accuracies;
    j["loss_a"] = r.loss_a;
    j["loss_b"] = r.loss_b;
    j["loss_barrier"] = r.loss_barrier;
    j["loss_auc"] = r.loss_auc;
    if (r.acc_a) j["acc_a"] = *r.acc_a;
    if (r.acc_b) j["acc_b"] = *r.acc_b;
    if (r.acc_barrier) j["acc_barrier"] = *r.acc_barrier;
    if (r.acc_auc) j["acc_auc"] = *r.acc_auc;
    return j;
}

inline BarrierReport barrier_report_from_json(const nlohmann::json& j) {
    BarrierReport r;
    r.curve.ts = require_field(j, "ts").get<std::vector<double>>();
    r.curve.losses = require_field(j, "losses").get<std::vector<double>>();
    if (j.contains("accuracies")) r.curve.accuracies = j["accuracies"].get<std::vector<double>>();
    r.loss_a = require_field(j, "loss_a").get<double>();
    r.loss_b = require_field(j, "loss_b").get<double>();
    r.loss_barrier = require_field(j, "loss_barrier").get<double>();
    r.loss_auc = require_field(j, "loss_auc").get<double>();
    if (j.contains("acc_a")) r.acc_a = j["acc_a"].get<double>();
    if (j.contains("acc_b")) r.acc_b = j["acc_b"].get<double>();
    if (j.contains("acc_barrier")) r.acc_barrier = j["acc_barrier"].get<double>();
    if (j.contains("acc_auc")) r.acc_auc = j["acc_auc"].get<double>();
    return r;
}

inline nlohmann::json rank_report_to_json(const RankReport& r) {
    nlohmann::json j;
    j["type"] = "rank_report";
    j["permutations"] = r.permutations;
    j["barriers"] = r.barriers;
    j["chosen_tau"] = r.chosen_tau;
    j["rank"] = r.rank;
    j["l_method"] = r.l_method;
    j["l_top1"] = r.l_top1;
    j["l_naive"] = r.l_naive;
    j["l_hat"] = r.l_hat;
    return j;
}

inline RankReport rank_report_from_json(const nlohmann::json& j) {
    RankReport r;
    r.permutations = require_field(j, "permutations").get<std::vector<Permutation>>();
    r.barriers = require_field(j, "barriers").get<std::vector<double>>();
    r.chosen_tau = require_field(j, "chosen_tau").get<Permutation>();
    r.rank = require_field(j, "rank").get<std::size_t>();
    r.l_method = require_field(j, "l_method").get<double>();
    r.l_top1 = require_field(j, "l_top1").get<double>();
    r.l_naive = require_field(j, "l_naive").get<double>();
    r.l_hat = require_field(j, "l_hat").get<double>();
    return r;
}

inline std::string perm_to_string(std::span<const std::size_t> p) {
    std::string out;
    for (std::size_t i = 0; i < p.size(); ++i) {
        if (i) out.push_back(' ');
        out += std::to_string(p[i]);
    }
    return out;
}

}  // namespace detail

/// CSV: one data row per grid point (t, loss, chord, accuracy) and a final
/// '#'-prefixed summary row; numbers at 17 significant digits.
inline std::string barrier_report_to_csv(const BarrierReport& r) {
    std::string out = "t,loss,chord,accuracy\n";
    for (std::size_t j = 0; j < r.curve.ts.size(); ++j) {
        const double chord = r.loss_b + r.curve.ts[j] * (r.loss_a - r.loss_b);
        out += detail::format_double(r.curve.ts[j]) + "," +
               detail::format_double(r.curve.losses[j]) + "," + detail::format_double(chord) + ",";
        if (r.curve.has_accuracy()) out += detail::format_double(r.curve.accuracies[j]);
        out.push_back('\n');
    }
    out += "# loss_a=" + detail::format_double(r.loss_a) +
           " loss_b=" + detail::format_double(r.loss_b) +
           " loss_barrier=" + detail::format_double(r.loss_barrier) +
           " loss_auc=" + detail::format_double(r.loss_auc);
    if (r.acc_barrier) {
        out += " acc_a=" + detail::format_double(*r.acc_a) +
               " acc_b=" + detail::format_double(*r.acc_b) +
               " acc_barrier=" + detail::format_double(*r.acc_barrier) +
               " acc_auc=" + detail::format_double(*r.acc_auc);
    }
    out.push_back('\n');
    return out;
}

inline std::string rank_report_to_csv(const RankReport& r) {
    std::string out = "permutation,barrier\n";
    for (std::size_t p = 0; p < r.permutations.size(); ++p) {
        out += detail::perm_to_string(r.permutations[p]) + "," +
               detail::format_double(r.barriers[p]) + "\n";
    }
    out += "# chosen=" + detail::perm_to_string(r.chosen_tau) +
           " rank=" + std::to_string(r.rank) +
           " l_method=" + detail::format_double(r.l_method) +
           " l_top1=" + detail::format_double(r.l_top1) +
           " l_naive=" + detail::format_double(r.l_naive) +
           " l_hat=" + detail::format_double(r.l_hat) + "\n";
    return out;
}

inline void export_report(const std::string& path, const BarrierReport& r, ReportFormat format) {
    write_text_file(path, format == ReportFormat::Json
                              ? detail::barrier_report_to_json(r).dump(2) + "\n"
                              : barrier_report_to_csv(r));
}

inline void export_report(const std::string& path, const RankReport& r, ReportFormat format) {
    write_text_file(path, format == ReportFormat::Json
                              ? detail::rank_report_to_json(r).dump(2) + "\n"
                              : rank_report_to_csv(r));
}

using AnyReport = std::variant<BarrierReport, RankReport>;

inline AnyReport load_report(const std::string& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error(std::string("malformed report JSON: ") + e.what());
    }
    const std::string type = detail::require_field(j, "type").get<std::string>();
    if (type == "barrier_report") return detail::barrier_report_from_json(j);
    if (type == "rank_report") return detail::rank_report_from_json(j);
    throw std::runtime_error("unknown report type: " + type);
}

inline void export_report(const std::string& path, const AnyReport& report, ReportFormat format) {
    std::visit([&](const auto& r) { export_report(path, r, format); }, report);
}

}  // namespace rebasin
