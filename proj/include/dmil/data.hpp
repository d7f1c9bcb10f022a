// Licensed under the Apache License, Version 2.0 (the "License"); you
// may not use this file except in compliance with the License.  You
// may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or
// implied.  See the License for the specific language governing
// permissions and limitations under the License.

// Datasets of bags, confounder dictionaries and named-tensor checkpoints,
// with their on-disk encodings.
//
// Feature store (a directory):
//   manifest.tsv       header `bag_id label n context_id split`, one row per bag
//   <bag_id>.bagf32    "BAGF" u32 n, u32 d, n*d f32 row-major
//   meta.txt           optional key=value: d, num_classes, provenance
// Dictionary file: "CDIC" u32 K, u32 d, K f32 prior, K*d f32 strata,
//   u32-length-prefixed UTF-8 key=value metadata (carries a payload checksum).
// Checkpoint file: "MCKP" u32 count, then per tensor a u32-prefixed name,
//   u32 rows, u32 cols, f32 data; a u32-prefixed metadata string; and a
//   trailing FNV-1a 32 of every preceding byte.
// All integers and floats are little-endian.

#pragma once

#include "dmil/io.hpp"
#include "dmil/matrix.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace dmil {

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

inline Split parse_split(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "test") return Split::test;
    throw FormatError("unknown split '" + s + "'");
}

struct Bag {
    std::string bag_id;
    Matrix instances;  // n x d
    std::size_t label = 0;
    int context_id = 0;  // generator/diagnostic only; models never read it
    Split split = Split::train;

    std::size_t size() const noexcept { return instances.rows(); }
    bool operator==(const Bag&) const = default;
};

struct Dataset {
    std::vector<Bag> bags;
    std::size_t d = 0;
    std::size_t num_classes = 2;
    std::string provenance;

    bool operator==(const Dataset&) const = default;

    std::vector<const Bag*> split(Split s) const {
        std::vector<const Bag*> out;
        for (const auto& b : bags)
            if (b.split == s) out.push_back(&b);
        return out;
    }

    /// Throws FormatError describing the first violated invariant.
    void validate() const {
        if (bags.empty()) throw FormatError("dataset: no bags");
        if (num_classes < 2) throw FormatError("dataset: num_classes must be >= 2");
        std::set<std::string> ids;
        std::vector<int> train_per_class(num_classes, 0);
        for (const auto& b : bags) {
            if (b.instances.rows() == 0) throw FormatError("dataset: bag '" + b.bag_id + "' is empty");
            if (b.instances.cols() != d) {
                throw FormatError("dataset: bag '" + b.bag_id + "' has d=" + std::to_string(b.instances.cols()) +
                                  ", expected " + std::to_string(d));
            }
            if (b.label >= num_classes) throw FormatError("dataset: bag '" + b.bag_id + "' label out of range");
            if (b.bag_id.empty() || b.bag_id.find_first_of("/\\\t\n") != std::string::npos) {
                throw FormatError("dataset: invalid bag_id '" + b.bag_id + "'");
            }
            if (!ids.insert(b.bag_id).second) throw FormatError("dataset: duplicate bag_id '" + b.bag_id + "'");
            if (!b.instances.all_finite()) throw NumericError("dataset: bag '" + b.bag_id + "' has non-finite values");
            if (b.split == Split::train) ++train_per_class[b.label];
        }
        for (std::size_t c = 0; c < num_classes; ++c) {
            if (train_per_class[c] == 0) {
                throw FormatError("dataset: class " + std::to_string(c) + " has no training bags");
            }
        }
    }
};

/// Copy of `ds` with every context_id zeroed, the only form trainers see.
inline Dataset blinded(Dataset ds) {
    for (auto& b : ds.bags) b.context_id = 0;
    return ds;
}

enum class DictionaryMode { attention, mean, max, instance, class_specific };

inline std::string to_string(DictionaryMode m) {
    switch (m) {
        case DictionaryMode::attention: return "attention";
        case DictionaryMode::mean: return "mean";
        case DictionaryMode::max: return "max";
        case DictionaryMode::instance: return "instance";
        case DictionaryMode::class_specific: return "class-specific";
    }
    return "?";
}

inline DictionaryMode parse_dictionary_mode(const std::string& s) {
    if (s == "attention") return DictionaryMode::attention;
    if (s == "mean") return DictionaryMode::mean;
    if (s == "max") return DictionaryMode::max;
    if (s == "instance") return DictionaryMode::instance;
    if (s == "class-specific" || s == "class_specific") return DictionaryMode::class_specific;
    throw FormatError("unknown dictionary mode '" + s + "'");
}

/// K confounder strata (rows) with their prior. `strata_class` is filled only
/// for class-specific dictionaries and maps each stratum to its class.
struct ConfounderDictionary {
    Matrix strata;  // K x d
    std::vector<double> prior;
    DictionaryMode build_mode = DictionaryMode::attention;
    bool frozen = true;
    std::string source_hash;
    std::vector<std::size_t> strata_class;

    std::size_t k() const noexcept { return strata.rows(); }
    std::size_t d() const noexcept { return strata.cols(); }
    bool operator==(const ConfounderDictionary&) const = default;

    void validate() const {
        if (k() == 0) throw FormatError("dictionary: K must be positive");
        if (prior.size() != k()) throw FormatError("dictionary: prior length differs from K");
        double total = 0.0;
        for (double p : prior) {
            if (!(p >= 0.0)) throw FormatError("dictionary: negative prior entry");
            total += p;
        }
        // Loose enough for an f32-rounded 1/K prior.
        if (std::abs(total - 1.0) > 1e-6) throw FormatError("dictionary: prior does not sum to 1");
        if (!strata_class.empty() && strata_class.size() != k()) {
            throw FormatError("dictionary: strata_class length differs from K");
        }
        require_finite(strata, "dictionary");
    }

    static std::vector<double> uniform_prior(std::size_t k) {
        return std::vector<double>(k, 1.0 / static_cast<double>(k));
    }
};

// ---------------------------------------------------------------------------
// Feature store

inline std::vector<char> encode_bag(const Matrix& instances) {
    ByteWriter w;
    w.raw("BAGF");
    w.u32(static_cast<std::uint32_t>(instances.rows()));
    w.u32(static_cast<std::uint32_t>(instances.cols()));
    for (double x : instances.values()) w.f32(x);
    return w.bytes();
}

inline Matrix decode_bag(const std::vector<char>& bytes, const std::string& bag_id) {
    ByteReader r(bytes, "bag '" + bag_id + "'");
    if (r.raw(4) != "BAGF") throw FormatError("bag '" + bag_id + "': bad magic");
    const std::uint32_t n = r.u32();
    const std::uint32_t d = r.u32();
    const std::size_t payload = static_cast<std::size_t>(n) * d * 4;
    if (r.remaining() != payload) {
        throw FormatError("bag '" + bag_id + "': header says " + std::to_string(n) + "x" + std::to_string(d) +
                          " but payload has " + std::to_string(r.remaining()) + " bytes");
    }
    Matrix m(n, d);
    for (std::size_t i = 0; i < m.size(); ++i) m[i] = r.f32();
    return m;
}

inline void write_feature_store(const Dataset& ds, const std::filesystem::path& dir) {
    ds.validate();
    std::filesystem::create_directories(dir);
    std::ostringstream manifest;
    manifest << "bag_id\tlabel\tn\tcontext_id\tsplit\n";
    for (const auto& b : ds.bags) {
        manifest << b.bag_id << '\t' << b.label << '\t' << b.size() << '\t' << b.context_id << '\t'
                 << to_string(b.split) << '\n';
        write_file(dir / (b.bag_id + ".bagf32"), encode_bag(b.instances));
    }
    write_text(dir / "manifest.tsv", manifest.str());
    std::ostringstream meta;
    meta << "d=" << ds.d << "\nnum_classes=" << ds.num_classes << "\nprovenance=" << ds.provenance << "\n";
    write_text(dir / "meta.txt", meta.str());
}

/// Loads a feature store. With `blind` set, every context_id reads as 0.
inline Dataset read_feature_store(const std::filesystem::path& dir, bool blind = false) {
    const auto manifest_path = dir / "manifest.tsv";
    if (!std::filesystem::exists(manifest_path)) throw IoError("missing manifest: " + manifest_path.string());
    const auto text = read_file(manifest_path);
    std::istringstream in(std::string(text.begin(), text.end()));

    Dataset ds;
    std::optional<std::size_t> meta_classes;
    if (std::filesystem::exists(dir / "meta.txt")) {
        const auto mt = read_file(dir / "meta.txt");
        auto kv = parse_key_values(std::string_view(mt.data(), mt.size()), "meta.txt");
        if (kv.count("num_classes")) meta_classes = std::stoul(kv["num_classes"]);
        if (kv.count("provenance")) ds.provenance = kv["provenance"];
    }
    if (ds.provenance.empty()) ds.provenance = "ingest:" + dir.string();

    std::string line;
    if (!std::getline(in, line)) throw FormatError("manifest.tsv: empty");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "bag_id\tlabel\tn\tcontext_id\tsplit") throw FormatError("manifest.tsv: unexpected header");

    int lineno = 1;
    std::size_t max_label = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string id, label, n, ctx, split;
        if (!std::getline(row, id, '\t') || !std::getline(row, label, '\t') || !std::getline(row, n, '\t') ||
            !std::getline(row, ctx, '\t') || !std::getline(row, split)) {
            throw FormatError("manifest.tsv:" + std::to_string(lineno) + ": expected 5 columns");
        }
        Bag b;
        b.bag_id = id;
        try {
            b.label = std::stoul(label);
            b.context_id = blind ? 0 : std::stoi(ctx);
        } catch (const std::exception&) {
            throw FormatError("manifest.tsv:" + std::to_string(lineno) + ": bad integer field");
        }
        b.split = parse_split(split);
        b.instances = decode_bag(read_file(dir / (id + ".bagf32")), id);
        if (std::to_string(b.instances.rows()) != n) {
            throw FormatError("bag '" + id + "': manifest n=" + n + " but file has " +
                              std::to_string(b.instances.rows()));
        }
        if (ds.bags.empty()) {
            ds.d = b.instances.cols();
        } else if (b.instances.cols() != ds.d) {
            throw FormatError("bag '" + id + "': d=" + std::to_string(b.instances.cols()) + " differs from " +
                              std::to_string(ds.d));
        }
        max_label = std::max(max_label, b.label);
        ds.bags.push_back(std::move(b));
    }
    ds.num_classes = meta_classes.value_or(std::max<std::size_t>(2, max_label + 1));
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Dictionary

inline std::vector<char> encode_dictionary(const ConfounderDictionary& dict) {
    dict.validate();
    ByteWriter payload;
    for (double p : dict.prior) payload.f32(p);
    for (double x : dict.strata.values()) payload.f32(x);
    const auto& pb = payload.bytes();

    std::ostringstream meta;
    meta << "build_mode=" << to_string(dict.build_mode) << "\n";
    meta << "frozen=" << (dict.frozen ? 1 : 0) << "\n";
    meta << "source_hash=" << dict.source_hash << "\n";
    if (!dict.strata_class.empty()) {
        meta << "strata_class=";
        for (std::size_t i = 0; i < dict.strata_class.size(); ++i) meta << (i ? "," : "") << dict.strata_class[i];
        meta << "\n";
    }
    meta << "payload_fnv1a=" << hex32(fnv1a32(pb.data(), pb.size())) << "\n";

    ByteWriter w;
    w.raw("CDIC");
    w.u32(static_cast<std::uint32_t>(dict.k()));
    w.u32(static_cast<std::uint32_t>(dict.d()));
    w.raw(std::string_view(pb.data(), pb.size()));
    w.string(meta.str());
    return w.bytes();
}

inline ConfounderDictionary decode_dictionary(const std::vector<char>& bytes) {
    ByteReader r(bytes, "dictionary");
    if (r.raw(4) != "CDIC") throw FormatError("dictionary: bad magic");
    const std::uint32_t k = r.u32();
    const std::uint32_t d = r.u32();
    if (k == 0) throw FormatError("dictionary: K must be positive");
    if (d == 0) throw FormatError("dictionary: d must be positive");
    const std::size_t payload_bytes = (static_cast<std::size_t>(k) + static_cast<std::size_t>(k) * d) * 4;
    r.need(payload_bytes);
    const std::size_t payload_start = r.position();

    ConfounderDictionary dict;
    dict.prior.resize(k);
    for (auto& p : dict.prior) p = r.f32();
    dict.strata = Matrix(k, d);
    for (std::size_t i = 0; i < dict.strata.size(); ++i) dict.strata[i] = r.f32();
    const std::string meta = r.string();
    if (r.remaining() != 0) throw FormatError("dictionary: trailing bytes after metadata");

    auto kv = parse_key_values(meta, "dictionary metadata");
    const auto sum = hex32(fnv1a32(bytes.data() + payload_start, payload_bytes));
    if (kv.count("payload_fnv1a") && kv["payload_fnv1a"] != sum) throw FormatError("dictionary: checksum mismatch");
    if (kv.count("build_mode")) dict.build_mode = parse_dictionary_mode(kv["build_mode"]);
    if (kv.count("frozen")) dict.frozen = kv["frozen"] != "0";
    if (kv.count("source_hash")) dict.source_hash = kv["source_hash"];
    if (kv.count("strata_class") && !kv["strata_class"].empty()) {
        std::istringstream in(kv["strata_class"]);
        std::string tok;
        while (std::getline(in, tok, ',')) dict.strata_class.push_back(std::stoul(tok));
    }
    dict.validate();
    return dict;
}

inline void save_dictionary(const ConfounderDictionary& dict, const std::filesystem::path& p) {
    write_file(p, encode_dictionary(dict));
}

inline ConfounderDictionary load_dictionary(const std::filesystem::path& p) {
    return decode_dictionary(read_file(p));
}

// ---------------------------------------------------------------------------
// Named-tensor checkpoints

struct Checkpoint {
    std::map<std::string, Matrix> tensors;
    std::map<std::string, std::string> meta;
    bool operator==(const Checkpoint&) const = default;
};

inline std::vector<char> encode_checkpoint(const Checkpoint& ck) {
    ByteWriter w;
    w.raw("MCKP");
    w.u32(static_cast<std::uint32_t>(ck.tensors.size()));
    for (const auto& [name, m] : ck.tensors) {
        w.string(name);
        w.u32(static_cast<std::uint32_t>(m.rows()));
        w.u32(static_cast<std::uint32_t>(m.cols()));
        for (double x : m.values()) w.f32(x);
    }
    std::ostringstream meta;
    for (const auto& [k, v] : ck.meta) meta << k << "=" << v << "\n";
    w.string(meta.str());
    const auto& b = w.bytes();
    w.u32(fnv1a32(b.data(), b.size()));
    return w.bytes();
}

inline Checkpoint decode_checkpoint(const std::vector<char>& bytes) {
    if (bytes.size() < 12) throw FormatError("checkpoint: truncated");
    ByteReader tail(bytes, "checkpoint");
    const std::size_t body = bytes.size() - 4;
    std::uint32_t stored = 0;
    for (int i = 0; i < 4; ++i)
        stored |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[body + i])) << (8 * i);
    if (stored != fnv1a32(bytes.data(), body)) throw FormatError("checkpoint: checksum mismatch");

    const std::vector<char> head(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(body));
    ByteReader r(head, "checkpoint");
    if (r.raw(4) != "MCKP") throw FormatError("checkpoint: bad magic");
    Checkpoint ck;
    const std::uint32_t count = r.u32();
    for (std::uint32_t t = 0; t < count; ++t) {
        std::string name = r.string();
        const std::uint32_t rows = r.u32();
        const std::uint32_t cols = r.u32();
        r.need(static_cast<std::size_t>(rows) * cols * 4);
        Matrix m(rows, cols);
        for (std::size_t i = 0; i < m.size(); ++i) m[i] = r.f32();
        ck.tensors.emplace(std::move(name), std::move(m));
    }
    const std::string meta = r.string();
    if (r.remaining() != 0) throw FormatError("checkpoint: trailing bytes");
    ck.meta = parse_key_values(meta, "checkpoint metadata");
    return ck;
}

inline void save_checkpoint(const Checkpoint& ck, const std::filesystem::path& p) {
    write_file(p, encode_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::filesystem::path& p) { return decode_checkpoint(read_file(p)); }

/// Rounds every value through f32, matching what persistence keeps.
inline Matrix round_to_f32(Matrix m) {
    for (auto& x : m.values()) x = static_cast<double>(static_cast<float>(x));
    return m;
}

}  // namespace dmil
