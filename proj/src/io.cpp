#include "lsiq/io.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"

namespace lsiq {

using nlohmann::json;

namespace {

constexpr char kMagic[8] = {'L', 'S', 'I', 'Q', 'T', 'N', 'S', 'R'};
constexpr uint32_t kVersion = 1;

void check_bits(int bits) {
    if (bits != 2 && bits != 3 && bits != 4 && bits != 6 && bits != 8)
        throw ConfigError("packed code width must be one of {2,3,4,6,8}, got " +
                          std::to_string(bits));
}

size_t packed_bytes(size_t count, int bits) {
    return (count * static_cast<size_t>(bits) + 7) / 8;
}

uint64_t align8(uint64_t n) { return (n + 7) & ~7ull; }

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace

std::vector<uint8_t> pack_codes(const std::vector<int32_t>& codes, int bits) {
    check_bits(bits);
    const int32_t maxv = (1 << bits) - 1;
    std::vector<uint8_t> out(packed_bytes(codes.size(), bits), 0);
    for (size_t i = 0; i < codes.size(); ++i) {
        const int32_t v = codes[i];
        if (v < 0 || v > maxv)
            throw DomainError("code " + std::to_string(v) + " out of range for " +
                              std::to_string(bits) + "-bit packing");
        const size_t bitpos = i * static_cast<size_t>(bits);
        for (int b = 0; b < bits; ++b)
            if (v & (1 << b)) out[(bitpos + b) / 8] |= static_cast<uint8_t>(1u << ((bitpos + b) % 8));
    }
    return out;
}

std::vector<int32_t> unpack_codes(const std::vector<uint8_t>& bytes, int bits, size_t count) {
    check_bits(bits);
    if (bytes.size() != packed_bytes(count, bits))
        throw ParseError("packed code buffer has " + std::to_string(bytes.size()) +
                         " bytes, expected " + std::to_string(packed_bytes(count, bits)));
    std::vector<int32_t> out(count, 0);
    for (size_t i = 0; i < count; ++i) {
        const size_t bitpos = i * static_cast<size_t>(bits);
        int32_t v = 0;
        for (int b = 0; b < bits; ++b)
            if (bytes[(bitpos + b) / 8] & (1u << ((bitpos + b) % 8))) v |= 1 << b;
        out[i] = v;
    }
    return out;
}

size_t TensorEntry::count() const {
    size_t n = 1;
    for (int64_t d : shape) {
        if (d < 0) throw ParseError("negative tensor dimension");
        n *= static_cast<size_t>(d);
    }
    return n;
}

const TensorEntry& TensorContainer::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ParseError("missing tensor: " + name);
    return it->second;
}

void TensorContainer::put_matrix(const std::string& name, const Matrix& m) {
    TensorEntry e;
    e.dtype = "f64";
    e.shape = {m.rows, m.cols};
    e.f64 = m.data;
    tensors[name] = std::move(e);
}

void TensorContainer::put_vector(const std::string& name, const std::vector<double>& v) {
    TensorEntry e;
    e.dtype = "f64";
    e.shape = {static_cast<int64_t>(v.size())};
    e.f64 = v;
    tensors[name] = std::move(e);
}

void TensorContainer::put_bytes(const std::string& name, const std::vector<uint8_t>& v) {
    TensorEntry e;
    e.dtype = "u8";
    e.shape = {static_cast<int64_t>(v.size())};
    e.u8 = v;
    tensors[name] = std::move(e);
}

void TensorContainer::put_packed(const std::string& name, const std::vector<int32_t>& codes,
                                 int bits, int rows, int cols) {
    if (static_cast<size_t>(rows) * cols != codes.size())
        throw ShapeError("packed shape does not match code count");
    TensorEntry e;
    e.dtype = "pack" + std::to_string(bits);
    e.shape = {rows, cols};
    e.u8 = pack_codes(codes, bits);
    tensors[name] = std::move(e);
}

Matrix TensorContainer::get_matrix(const std::string& name) const {
    const TensorEntry& e = at(name);
    if (e.dtype != "f64" || e.shape.size() != 2)
        throw ParseError("tensor " + name + " is not an f64 matrix");
    Matrix m(static_cast<int>(e.shape[0]), static_cast<int>(e.shape[1]));
    if (e.f64.size() != m.size()) throw ParseError("tensor " + name + " has wrong element count");
    m.data = e.f64;
    return m;
}

std::vector<double> TensorContainer::get_vector(const std::string& name) const {
    const TensorEntry& e = at(name);
    if (e.dtype != "f64" || e.shape.size() != 1)
        throw ParseError("tensor " + name + " is not an f64 vector");
    return e.f64;
}

std::vector<int32_t> TensorContainer::get_packed(const std::string& name, int* rows, int* cols,
                                                 int* bits) const {
    const TensorEntry& e = at(name);
    if (e.dtype.rfind("pack", 0) != 0 || e.shape.size() != 2)
        throw ParseError("tensor " + name + " is not a packed code matrix");
    int k = 0;
    try {
        k = std::stoi(e.dtype.substr(4));
    } catch (const std::exception&) {
        throw ParseError("tensor " + name + " has malformed dtype " + e.dtype);
    }
    check_bits(k);
    if (rows) *rows = static_cast<int>(e.shape[0]);
    if (cols) *cols = static_cast<int>(e.shape[1]);
    if (bits) *bits = k;
    return unpack_codes(e.u8, k, e.count());
}

namespace {

void append_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t read_u32(const uint8_t* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(p[i]) << (8 * i);
    return v;
}

uint64_t read_u64(const uint8_t* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(p[i]) << (8 * i);
    return v;
}

size_t expected_bytes(const TensorEntry& e) {
    if (e.dtype == "f64") return e.count() * 8;
    if (e.dtype == "u8") return e.count();
    if (e.dtype.rfind("pack", 0) == 0) {
        int k = std::stoi(e.dtype.substr(4));
        check_bits(k);
        return packed_bytes(e.count(), k);
    }
    throw ParseError("unknown tensor dtype: " + e.dtype);
}

const std::vector<uint8_t>* payload_of(const TensorEntry& e, std::vector<uint8_t>& scratch) {
    if (e.dtype == "f64") {
        scratch.resize(e.f64.size() * 8);
        std::memcpy(scratch.data(), e.f64.data(), scratch.size());
        return &scratch;
    }
    return &e.u8;
}

json parse_strict(const std::string& text) {
    std::vector<std::set<std::string>> stack;
    json::parser_callback_t cb = [&stack](int, json::parse_event_t ev, json& parsed) {
        if (ev == json::parse_event_t::object_start) {
            stack.emplace_back();
        } else if (ev == json::parse_event_t::object_end) {
            stack.pop_back();
        } else if (ev == json::parse_event_t::key) {
            const std::string k = parsed.get<std::string>();
            if (!stack.back().insert(k).second)
                throw ParseError("duplicate key in header: " + k);
        }
        return true;
    };
    try {
        return json::parse(text, cb);
    } catch (const ParseError&) {
        throw;
    } catch (const std::exception& ex) {
        throw ParseError(std::string("header is not valid JSON: ") + ex.what());
    }
}

} // namespace

void write_container(const std::string& path, const TensorContainer& c) {
    // assign 8-aligned offsets in name order
    json header;
    header["meta"] = json::object();
    for (const auto& [k, v] : c.meta) header["meta"][k] = v;
    header["tensors"] = json::object();
    uint64_t off = 0;
    for (const auto& [name, e] : c.tensors) {
        const size_t len = expected_bytes(e);
        const size_t have = (e.dtype == "f64") ? e.f64.size() * 8 : e.u8.size();
        if (have != len)
            throw ShapeError("tensor " + name + " payload does not match its shape");
        json t;
        t["dtype"] = e.dtype;
        t["shape"] = e.shape;
        t["offset"] = off;
        t["length"] = len;
        header["tensors"][name] = std::move(t);
        off = align8(off + len);
    }
    const std::string htext = header.dump();

    std::string blob;
    blob.append(kMagic, 8);
    append_u32(blob, kVersion);
    append_u64(blob, htext.size());
    blob += htext;
    blob.resize(align8(blob.size()), '\0');
    const size_t payload_start = blob.size();
    for (const auto& [name, e] : c.tensors) {
        (void)name;
        std::vector<uint8_t> scratch;
        const std::vector<uint8_t>* bytes = payload_of(e, scratch);
        blob.append(reinterpret_cast<const char*>(bytes->data()), bytes->size());
        blob.resize(payload_start + align8(blob.size() - payload_start), '\0');
    }

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw Error("cannot open for writing: " + tmp);
        f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        if (!f) throw Error("write failed: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw Error("cannot move " + tmp + " into place: " + ec.message());
    }
}

TensorContainer read_container(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ParseError("cannot open: " + path);
    std::vector<uint8_t> data((std::istreambuf_iterator<char>(f)),
                              std::istreambuf_iterator<char>());
    if (data.size() < 20) throw ParseError("file too short for container header");
    if (std::memcmp(data.data(), kMagic, 8) != 0) throw ParseError("bad container magic");
    const uint32_t version = read_u32(data.data() + 8);
    if (version != kVersion)
        throw ParseError("unsupported container version " + std::to_string(version));
    const uint64_t hlen = read_u64(data.data() + 12);
    if (hlen > data.size() - 20) throw ParseError("header length exceeds file size");
    const std::string htext(reinterpret_cast<const char*>(data.data()) + 20,
                            static_cast<size_t>(hlen));
    const json header = parse_strict(htext);
    if (!header.is_object() || !header.contains("meta") || !header.contains("tensors") ||
        !header["meta"].is_object() || !header["tensors"].is_object())
        throw ParseError("header must contain meta and tensors objects");

    TensorContainer c;
    for (const auto& [k, v] : header["meta"].items()) {
        if (!v.is_string()) throw ParseError("meta value for " + k + " is not a string");
        c.meta[k] = v.get<std::string>();
    }
    const uint64_t payload_start = align8(20 + hlen);
    if (payload_start > data.size()) throw ParseError("truncated container payload");
    std::vector<std::pair<uint64_t, uint64_t>> ranges;
    for (const auto& [name, t] : header["tensors"].items()) {
        if (!t.is_object() || !t.contains("dtype") || !t.contains("shape") ||
            !t.contains("offset") || !t.contains("length"))
            throw ParseError("tensor " + name + " record is incomplete");
        if (!t["dtype"].is_string() || !t["shape"].is_array() ||
            !t["offset"].is_number_unsigned() || !t["length"].is_number_unsigned())
            throw ParseError("tensor " + name + " record has wrong field types");
        TensorEntry e;
        e.dtype = t["dtype"].get<std::string>();
        for (const auto& d : t["shape"]) {
            if (!d.is_number_integer()) throw ParseError("tensor " + name + " shape not integer");
            e.shape.push_back(d.get<int64_t>());
        }
        const uint64_t off = t["offset"].get<uint64_t>();
        const uint64_t len = t["length"].get<uint64_t>();
        if (off % 8 != 0) throw ParseError("tensor " + name + " offset not 8-aligned");
        if (len != expected_bytes(e))
            throw ParseError("tensor " + name + " length does not match its shape");
        if (payload_start + off + len > data.size() || payload_start + off < payload_start)
            throw ParseError("tensor " + name + " extends past end of file");
        ranges.emplace_back(off, len);
        const uint8_t* src = data.data() + payload_start + off;
        if (e.dtype == "f64") {
            e.f64.resize(e.count());
            std::memcpy(e.f64.data(), src, len);
        } else {
            e.u8.assign(src, src + len);
        }
        c.tensors[name] = std::move(e);
    }
    std::sort(ranges.begin(), ranges.end());
    for (size_t i = 1; i < ranges.size(); ++i)
        if (ranges[i].first < ranges[i - 1].first + ranges[i - 1].second)
            throw ParseError("overlapping tensor ranges in container");
    return c;
}

// ---- model serialization ----

namespace {

const char* const kWeightNames[6] = {"wq", "wk", "wv", "wo", "w_up", "w_down"};

std::vector<QuantWeight*> block_weights(Block& b) {
    return {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_down};
}

std::vector<const QuantWeight*> block_weights(const Block& b) {
    return {&b.wq, &b.wk, &b.wv, &b.wo, &b.w_up, &b.w_down};
}

int meta_int(const TensorContainer& c, const std::string& key) {
    auto it = c.meta.find(key);
    if (it == c.meta.end()) throw ParseError("missing meta field: " + key);
    try {
        size_t pos = 0;
        int v = std::stoi(it->second, &pos);
        if (pos != it->second.size()) throw std::invalid_argument("trailing");
        return v;
    } catch (const std::exception&) {
        throw ParseError("meta field " + key + " is not an integer: " + it->second);
    }
}

std::string meta_str(const TensorContainer& c, const std::string& key) {
    auto it = c.meta.find(key);
    if (it == c.meta.end()) throw ParseError("missing meta field: " + key);
    return it->second;
}

} // namespace

void write_model(const std::string& path, const LayerGraph& m) {
    int n_quant = 0, n_plain = 0;
    for (const auto& b : m.blocks)
        for (const QuantWeight* qw : block_weights(b)) {
            if (qw->state == WeightState::Quantized) ++n_quant;
            else if (qw->state == WeightState::Float && !qw->quant_enabled) ++n_plain;
            else throw ConfigError("cannot save a model with unfolded trainable weights");
        }
    if (n_quant > 0 && n_plain > 0)
        throw ConfigError("cannot save a model with mixed float/quantized weights");
    const bool quantized = n_quant > 0;

    TensorContainer c;
    c.meta["format"] = "lsiq-model";
    c.meta["state"] = quantized ? "quantized" : "float";
    c.meta["layers"] = std::to_string(m.spec.layers);
    c.meta["width"] = std::to_string(m.spec.width);
    c.meta["heads"] = std::to_string(m.spec.heads);
    c.meta["vocab"] = std::to_string(m.spec.vocab);
    c.meta["mlp_mult"] = std::to_string(m.spec.mlp_mult);
    c.meta["max_seq"] = std::to_string(m.spec.max_seq);
    c.meta["outlier_fraction"] = fmt_double(m.spec.outlier_fraction);
    c.put_matrix("embedding", m.embedding);
    c.put_matrix("head", m.head);
    for (size_t i = 0; i < m.blocks.size(); ++i) {
        const Block& b = m.blocks[i];
        const std::string p = "block" + std::to_string(i) + ".";
        c.put_vector(p + "norm_gain", b.norm_gain);
        c.put_vector(p + "norm_bias", b.norm_bias);
        auto ws = block_weights(b);
        for (int w = 0; w < 6; ++w) {
            const QuantWeight& qw = *ws[w];
            const std::string wp = p + kWeightNames[w] + ".";
            if (!quantized) {
                c.put_matrix(wp + "w", qw.w);
                if (!qw.bias.empty()) c.put_vector(wp + "bias", qw.bias);
                continue;
            }
            c.put_packed(wp + "codes", qw.q.codes, qw.q.cfg.bits, qw.q.rows, qw.q.cols);
            c.put_vector(wp + "scales", qw.q.scales);
            c.put_vector(wp + "zeros", qw.q.zeros);
            if (!qw.folded_bias.empty()) c.put_vector(wp + "folded_bias", qw.folded_bias);
            c.meta[wp + "granularity"] =
                qw.q.cfg.granularity == Granularity::Group ? "group" : "channel";
            if (qw.q.cfg.granularity == Granularity::Group)
                c.meta[wp + "group_size"] = std::to_string(qw.q.cfg.group_size);
        }
        if (quantized) {
            auto put_sm = [&c, &p](const LinearSmooth& sm, const std::string& nm) {
                if (!sm.enabled) return;
                c.put_vector(p + nm + ".log_sc", sm.log_sc);
                c.put_vector(p + nm + ".delta", sm.delta);
            };
            put_sm(b.sm_qkv, "sm_qkv");
            put_sm(b.sm_out, "sm_out");
            put_sm(b.sm_up, "sm_up");
            if (!b.log_sa.empty()) c.put_vector(p + "sa", b.log_sa);
        }
    }
    write_container(path, c);
}

LayerGraph read_model(const std::string& path) {
    TensorContainer c = read_container(path);
    if (meta_str(c, "format") != "lsiq-model")
        throw ParseError("file is not a model container");
    LayerGraph m;
    m.spec.layers = meta_int(c, "layers");
    m.spec.width = meta_int(c, "width");
    m.spec.heads = meta_int(c, "heads");
    m.spec.vocab = meta_int(c, "vocab");
    m.spec.mlp_mult = meta_int(c, "mlp_mult");
    m.spec.max_seq = meta_int(c, "max_seq");
    auto of = c.meta.find("outlier_fraction");
    m.spec.outlier_fraction = of == c.meta.end() ? 0.0 : std::stod(of->second);
    const std::string state = meta_str(c, "state");
    if (state != "float" && state != "quantized")
        throw ParseError("unknown model state: " + state);
    const bool quantized = state == "quantized";
    if (m.spec.layers < 0 || m.spec.width <= 0 || m.spec.heads <= 0 ||
        m.spec.width % m.spec.heads != 0 || m.spec.vocab <= 1 || m.spec.max_seq <= 1 ||
        m.spec.mlp_mult <= 0)
        throw ParseError("model spec fields out of range");

    m.embedding = c.get_matrix("embedding");
    if (m.embedding.rows != m.spec.vocab || m.embedding.cols != m.spec.width)
        throw ParseError("embedding shape does not match the spec");
    m.head = c.get_matrix("head");
    if (m.head.rows != m.spec.width || m.head.cols != m.spec.vocab)
        throw ParseError("head shape does not match the spec");
    m.pos = sinusoidal_positions(m.spec.max_seq, m.spec.width);

    const int width = m.spec.width;
    const int hidden = m.spec.mlp_mult * width;
    const int in_dims[6] = {width, width, width, width, width, hidden};
    const int out_dims[6] = {width, width, width, width, hidden, width};
    for (int i = 0; i < m.spec.layers; ++i) {
        Block b;
        b.heads = m.spec.heads;
        b.head_dim = width / m.spec.heads;
        const std::string p = "block" + std::to_string(i) + ".";
        b.norm_gain = c.get_vector(p + "norm_gain");
        b.norm_bias = c.get_vector(p + "norm_bias");
        if (static_cast<int>(b.norm_gain.size()) != width ||
            static_cast<int>(b.norm_bias.size()) != width)
            throw ParseError(p + "norm affine size does not match the width");
        auto ws = block_weights(b);
        for (int w = 0; w < 6; ++w) {
            QuantWeight& qw = *ws[w];
            const std::string wp = p + kWeightNames[w] + ".";
            if (!quantized) {
                qw.w = c.get_matrix(wp + "w");
                if (qw.w.rows != in_dims[w] || qw.w.cols != out_dims[w])
                    throw ParseError(wp + "w has the wrong shape");
                if (c.has(wp + "bias")) {
                    qw.bias = c.get_vector(wp + "bias");
                    if (static_cast<int>(qw.bias.size()) != out_dims[w])
                        throw ParseError(wp + "bias has the wrong size");
                }
                continue;
            }
            int rows = 0, cols = 0, bits = 0;
            std::vector<int32_t> codes = c.get_packed(wp + "codes", &rows, &cols, &bits);
            if (rows != in_dims[w] || cols != out_dims[w])
                throw ParseError(wp + "codes has the wrong shape");
            QuantConfig qc;
            qc.bits = bits;
            qc.target = QuantTarget::Weight;
            const std::string gran = meta_str(c, wp + "granularity");
            if (gran == "group") {
                qc.granularity = Granularity::Group;
                qc.group_size = meta_int(c, wp + "group_size");
            } else if (gran == "channel") {
                qc.granularity = Granularity::PerChannel;
            } else {
                throw ParseError(wp + "granularity is unknown: " + gran);
            }
            qc.validate(rows, cols);
            qw.q.rows = rows;
            qw.q.cols = cols;
            qw.q.cfg = qc;
            qw.q.codes = std::move(codes);
            qw.q.scales = c.get_vector(wp + "scales");
            qw.q.zeros = c.get_vector(wp + "zeros");
            const size_t ng = static_cast<size_t>(qc.num_groups(rows, cols));
            if (qw.q.scales.size() != ng || qw.q.zeros.size() != ng)
                throw ParseError(wp + "scales/zeros do not match the group count");
            const int maxv = qc.levels();
            for (int32_t v : qw.q.codes)
                if (v < 0 || v > maxv) throw ParseError(wp + "codes contain out-of-range values");
            if (c.has(wp + "folded_bias")) {
                qw.folded_bias = c.get_vector(wp + "folded_bias");
                if (static_cast<int>(qw.folded_bias.size()) != out_dims[w])
                    throw ParseError(wp + "folded_bias has the wrong size");
            }
            qw.state = WeightState::Quantized;
            qw.cfg = qc;
        }
        if (quantized) {
            auto get_sm = [&c, &p](LinearSmooth& sm, const std::string& nm, int dim) {
                if (!c.has(p + nm + ".log_sc")) return;
                sm.enabled = true;
                sm.log_sc = c.get_vector(p + nm + ".log_sc");
                sm.delta = c.get_vector(p + nm + ".delta");
                if (static_cast<int>(sm.log_sc.size()) != dim ||
                    static_cast<int>(sm.delta.size()) != dim)
                    throw ParseError(p + nm + " vectors have the wrong size");
            };
            get_sm(b.sm_qkv, "sm_qkv", width);
            get_sm(b.sm_out, "sm_out", width);
            get_sm(b.sm_up, "sm_up", width);
            if (c.has(p + "sa")) {
                b.log_sa = c.get_vector(p + "sa");
                if (static_cast<int>(b.log_sa.size()) != b.head_dim)
                    throw ParseError(p + "sa has the wrong size");
            }
        }
        m.blocks.push_back(std::move(b));
    }
    return m;
}

std::vector<std::vector<int32_t>> load_tokens(const std::string& path, int vocab) {
    std::ifstream f(path);
    if (!f) throw ParseError("cannot open: " + path);
    std::vector<std::vector<int32_t>> seqs;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::istringstream ss(line);
        std::vector<int32_t> seq;
        std::string word;
        while (ss >> word) {
            long v = 0;
            try {
                size_t pos = 0;
                v = std::stol(word, &pos);
                if (pos != word.size()) throw std::invalid_argument("trailing");
            } catch (const std::exception&) {
                throw ParseError(path + " line " + std::to_string(lineno) +
                                 ": invalid token '" + word + "'");
            }
            if (v < 0 || v >= vocab)
                throw ParseError(path + " line " + std::to_string(lineno) + ": token id " +
                                 std::to_string(v) + " out of range [0, " +
                                 std::to_string(vocab) + ")");
            seq.push_back(static_cast<int32_t>(v));
        }
        if (seq.empty()) continue;
        if (!seqs.empty() && seq.size() != seqs[0].size())
            throw ParseError(path + " line " + std::to_string(lineno) + ": sequence length " +
                             std::to_string(seq.size()) + " differs from line 1 (" +
                             std::to_string(seqs[0].size()) + ")");
        seqs.push_back(std::move(seq));
    }
    if (seqs.empty()) throw ParseError(path + ": no token sequences found");
    return seqs;
}

void write_tokens(const std::string& path, const std::vector<std::vector<int32_t>>& seqs) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw Error("cannot open for writing: " + tmp);
        for (const auto& seq : seqs) {
            for (size_t i = 0; i < seq.size(); ++i) {
                if (i) f << ' ';
                f << seq[i];
            }
            f << '\n';
        }
        if (!f) throw Error("write failed: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) {
        std::filesystem::remove(tmp, ec);
        throw Error("cannot move " + tmp + " into place: " + ec.message());
    }
}

} // namespace lsiq
