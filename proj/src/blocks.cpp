#include "taat/blocks.hpp"

#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "taat/errors.hpp"

namespace taat {

Tensor conv_block(const Tensor& input, const ConvBlockParams& params, int stride, int padding) {
    Tensor out = conv2d(input, params.kernel, params.bias, stride, padding);
    out = batchnorm_inference(out, params.bn_mean, params.bn_var, params.bn_gamma, params.bn_beta,
                              params.bn_eps);
    return activation(out, params.act, params.act_slope);
}

std::vector<float> channel_attention(const Tensor& input, const AttentionParams& params) {
    if (input.n != 1) throw ShapeError("channel_attention requires batch size 1");
    const int c = input.c;
    if (params.reduction < 1 || c % params.reduction != 0)
        throw ParameterError("attention reduction " + std::to_string(params.reduction) +
                             " does not divide channel count " + std::to_string(c));
    const int hidden = c / params.reduction;
    if (params.fc1.rows != hidden || params.fc1.cols != c || params.fc2.rows != c ||
        params.fc2.cols != hidden)
        throw ShapeError("attention FC shapes inconsistent with C=" + std::to_string(c));

    const Tensor pooled = global_pool(input, params.pooling);
    std::vector<float> hid(static_cast<std::size_t>(hidden), 0.0f);
    for (int i = 0; i < hidden; ++i) {
        float acc = 0.0f;
        for (int j = 0; j < c; ++j) acc += params.fc1.at(i, j) * pooled.v[j];
        hid[i] = acc > 0.0f ? acc : 0.0f;
    }
    std::vector<float> out(static_cast<std::size_t>(c), 0.0f);
    for (int i = 0; i < c; ++i) {
        float acc = 0.0f;
        for (int j = 0; j < hidden; ++j) acc += params.fc2.at(i, j) * hid[j];
        out[i] = 1.0f / (1.0f + std::exp(-acc));
    }
    return out;
}

Tensor apply_attention(const Tensor& input, const std::vector<float>& attn) {
    if (static_cast<int>(attn.size()) != input.c)
        throw ShapeError("attention vector length " + std::to_string(attn.size()) +
                         " does not match channels " + std::to_string(input.c));
    Tensor out = input;
    const int plane = input.h * input.w;
    for (int in = 0; in < input.n; ++in)
        for (int ic = 0; ic < input.c; ++ic) {
            float* dst = &out.v[out.idx(in, ic, 0, 0)];
            for (int i = 0; i < plane; ++i) dst[i] *= attn[ic];
        }
    return out;
}

void softmax_rows_inplace(Matrix& m) {
    for (int i = 0; i < m.rows; ++i) {
        float* row = &m.v[static_cast<std::size_t>(i) * m.cols];
        float mx = row[0];
        for (int j = 1; j < m.cols; ++j) mx = std::max(mx, row[j]);
        float sum = 0.0f;
        for (int j = 0; j < m.cols; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += row[j];
        }
        for (int j = 0; j < m.cols; ++j) row[j] /= sum;
    }
}

NonLocalTrace non_local_traced(const Tensor& qk, const Tensor& value,
                               const NonLocalParams& params) {
    if (qk.n != 1 || value.n != 1) throw ShapeError("non_local requires batch size 1");
    if (qk.h != value.h || qk.w != value.w)
        throw ShapeError("non_local spatial mismatch: " + qk.shape_str() + " vs " +
                         value.shape_str());
    if (params.embed_q.out_channels() != params.embed_k.out_channels())
        throw ShapeError("non_local query/key embeddings must share channel count");

    const Tensor eq = conv_block(qk, params.embed_q, 1, 0);
    const Tensor ek = conv_block(qk, params.embed_k, 1, 0);
    const Tensor ev = conv_block(value, params.embed_v, 1, 0);

    Matrix sim = flat_similarity(eq, ek);
    softmax_rows_inplace(sim);

    const int hw = value.h * value.w;
    Tensor agg(1, ev.c, value.h, value.w);
    for (int ic = 0; ic < ev.c; ++ic) {
        const float* vals = &ev.v[static_cast<std::size_t>(ic) * hw];
        float* dst = &agg.v[static_cast<std::size_t>(ic) * hw];
        for (int i = 0; i < hw; ++i) {
            const float* srow = &sim.v[static_cast<std::size_t>(i) * hw];
            float acc = 0.0f;
            for (int j = 0; j < hw; ++j) acc += srow[j] * vals[j];
            dst[i] = acc;
        }
    }

    Tensor projected = conv_block(agg, params.project_out, 1, 0);
    NonLocalTrace trace;
    trace.output = elementwise(projected, value, EwOp::add);
    trace.similarity = std::move(sim);
    trace.aggregated = std::move(agg);
    return trace;
}

Tensor non_local(const Tensor& qk, const Tensor& value, const NonLocalParams& params) {
    return non_local_traced(qk, value, params).output;
}

// ---------------------------------------------------------------------------
// Weight storage

std::size_t WeightArray::numel() const {
    std::size_t p = 1;
    for (auto d : dims) p *= d;
    return p;
}

WeightArray WeightArray::from_tensor(const Tensor& t) {
    WeightArray a;
    a.dims = {static_cast<std::uint32_t>(t.n), static_cast<std::uint32_t>(t.c),
              static_cast<std::uint32_t>(t.h), static_cast<std::uint32_t>(t.w)};
    a.v = t.v;
    return a;
}

WeightArray WeightArray::from_matrix(const Matrix& m) {
    WeightArray a;
    a.dims = {static_cast<std::uint32_t>(m.rows), static_cast<std::uint32_t>(m.cols)};
    a.v = m.v;
    return a;
}

WeightArray WeightArray::from_vector(const std::vector<float>& vec) {
    WeightArray a;
    a.dims = {static_cast<std::uint32_t>(vec.size())};
    a.v = vec;
    return a;
}

Tensor WeightArray::to_tensor() const {
    if (dims.size() != 4) throw FormatError("weight entry is not rank 4");
    Tensor t(static_cast<int>(dims[0]), static_cast<int>(dims[1]), static_cast<int>(dims[2]),
             static_cast<int>(dims[3]));
    t.v = v;
    return t;
}

Matrix WeightArray::to_matrix() const {
    if (dims.size() != 2) throw FormatError("weight entry is not rank 2");
    Matrix m(static_cast<int>(dims[0]), static_cast<int>(dims[1]));
    m.v = v;
    return m;
}

namespace {

constexpr char kMagic[8] = {'T', 'A', 'A', 'T', 'W', '0', '0', '1'};

void put_u16(std::string& out, std::uint16_t x) {
    out.push_back(static_cast<char>(x & 0xff));
    out.push_back(static_cast<char>((x >> 8) & 0xff));
}

void put_u32(std::string& out, std::uint32_t x) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((x >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float x) {
    std::uint32_t bits;
    std::memcpy(&bits, &x, 4);
    put_u32(out, bits);
}

struct ByteCursor {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t count, const char* what) const {
        if (pos + count > buf.size())
            throw FormatError(std::string("truncated weight file while reading ") + what, pos);
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        auto r = static_cast<std::uint16_t>(static_cast<unsigned char>(buf[pos]) |
                                            (static_cast<unsigned char>(buf[pos + 1]) << 8));
        pos += 2;
        return r;
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t r = 0;
        for (int i = 0; i < 4; ++i)
            r |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return r;
    }
    std::uint8_t u8(const char* what) {
        need(1, what);
        return static_cast<std::uint8_t>(buf[pos++]);
    }
};

}  // namespace

void save_weights(const ModelWeights& weights, const std::string& path) {
    std::string out;
    out.append(kMagic, sizeof(kMagic));
    put_u32(out, static_cast<std::uint32_t>(weights.size()));
    for (const auto& [name, arr] : weights) {
        if (name.empty() || name.size() > 0xffff)
            throw FormatError("weight name length out of range: " + name);
        if (arr.dims.empty() || arr.dims.size() > 4)
            throw FormatError("weight rank out of range for " + name);
        if (arr.v.size() != arr.numel())
            throw FormatError("weight data length mismatch for " + name);
        put_u16(out, static_cast<std::uint16_t>(name.size()));
        out.append(name);
        out.push_back(static_cast<char>(arr.dims.size()));
        for (auto d : arr.dims) put_u32(out, d);
        for (float f : arr.v) put_f32(out, f);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open weight file for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw FormatError("short write to weight file: " + path);
}

ModelWeights load_weights(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open weight file: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    ByteCursor cur{buf};
    cur.need(sizeof(kMagic), "magic");
    if (std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0)
        throw FormatError("bad magic bytes in weight file " + path, 0);
    cur.pos = sizeof(kMagic);

    const std::uint32_t count = cur.u32("entry count");
    ModelWeights weights;
    for (std::uint32_t e = 0; e < count; ++e) {
        const std::uint16_t name_len = cur.u16("name length");
        cur.need(name_len, "name");
        std::string name = buf.substr(cur.pos, name_len);
        cur.pos += name_len;
        if (name.empty()) throw FormatError("empty weight name", cur.pos);

        const std::uint8_t rank = cur.u8("rank");
        if (rank < 1 || rank > 4)
            throw FormatError("weight rank " + std::to_string(rank) + " out of range for " + name,
                              cur.pos - 1);
        WeightArray arr;
        std::size_t numel = 1;
        for (int d = 0; d < rank; ++d) {
            arr.dims.push_back(cur.u32("dims"));
            numel *= arr.dims.back();
        }
        cur.need(numel * 4, "values");
        arr.v.resize(numel);
        std::memcpy(arr.v.data(), buf.data() + cur.pos, numel * 4);
        cur.pos += numel * 4;

        if (!weights.emplace(std::move(name), std::move(arr)).second)
            throw FormatError("duplicate weight name in file", cur.pos);
    }
    if (cur.pos != buf.size())
        throw FormatError("trailing bytes after last weight entry", cur.pos);
    return weights;
}

const WeightArray& WeightReader::take(const std::string& name, std::size_t rank) {
    auto it = weights_.find(name);
    if (it == weights_.end()) throw FormatError("missing weight entry: " + name);
    if (!consumed_.insert(name).second)
        throw FormatError("weight entry consumed twice: " + name);
    if (it->second.dims.size() != rank)
        throw FormatError("weight entry " + name + " has rank " +
                          std::to_string(it->second.dims.size()) + ", expected " +
                          std::to_string(rank));
    return it->second;
}

Tensor WeightReader::take_tensor(const std::string& name) { return take(name, 4).to_tensor(); }
Matrix WeightReader::take_matrix(const std::string& name) { return take(name, 2).to_matrix(); }
std::vector<float> WeightReader::take_vector(const std::string& name) { return take(name, 1).v; }

bool WeightReader::has_prefix(const std::string& prefix) const {
    auto it = weights_.lower_bound(prefix);
    return it != weights_.end() && it->first.compare(0, prefix.size(), prefix) == 0;
}

void WeightReader::finish() const {
    for (const auto& [name, arr] : weights_)
        if (!consumed_.count(name)) throw FormatError("unconsumed weight entry: " + name);
}

// ---------------------------------------------------------------------------
// Initialization

namespace {

Tensor uniform_kernel(int cout, int cin, int kh, int kw, Rng& rng) {
    Tensor k(cout, cin, kh, kw);
    const double s = std::sqrt(1.0 / (static_cast<double>(cin) * kh * kw));
    for (float& x : k.v) x = static_cast<float>(rng.uniform(-s, s));
    return k;
}

Matrix uniform_matrix(int rows, int cols, Rng& rng) {
    Matrix m(rows, cols);
    const double s = std::sqrt(1.0 / static_cast<double>(cols));
    for (float& x : m.v) x = static_cast<float>(rng.uniform(-s, s));
    return m;
}

}  // namespace

ConvBlockParams init_conv_block(int cout, int cin, int k, Act act, float slope, Rng& rng) {
    ConvBlockParams p;
    p.kernel = uniform_kernel(cout, cin, k, k, rng);
    p.bias.assign(static_cast<std::size_t>(cout), 0.0f);
    p.bn_mean.assign(static_cast<std::size_t>(cout), 0.0f);
    p.bn_var.assign(static_cast<std::size_t>(cout), 1.0f);
    p.bn_gamma.assign(static_cast<std::size_t>(cout), 1.0f);
    p.bn_beta.assign(static_cast<std::size_t>(cout), 0.0f);
    p.act = act;
    p.act_slope = slope;
    return p;
}

AttentionParams init_attention(int channels, int reduction, PoolMode pooling, Rng& rng) {
    if (reduction < 1 || channels % reduction != 0)
        throw ParameterError("attention reduction must divide channel count");
    AttentionParams p;
    p.reduction = reduction;
    p.pooling = pooling;
    p.fc1 = uniform_matrix(channels / reduction, channels, rng);
    p.fc2 = uniform_matrix(channels, channels / reduction, rng);
    return p;
}

NonLocalParams init_non_local(int qk_channels, int value_channels, int embed_channels, Rng& rng) {
    NonLocalParams p;
    p.embed_q = init_conv_block(embed_channels, qk_channels, 1, Act::none, 0.0f, rng);
    p.embed_k = init_conv_block(embed_channels, qk_channels, 1, Act::none, 0.0f, rng);
    p.embed_v = init_conv_block(embed_channels, value_channels, 1, Act::none, 0.0f, rng);
    p.project_out = init_conv_block(value_channels, embed_channels, 1, Act::none, 0.0f, rng);
    return p;
}

void put_conv_block(ModelWeights& w, const std::string& prefix, const ConvBlockParams& p) {
    w[prefix + "/kernel"] = WeightArray::from_tensor(p.kernel);
    w[prefix + "/bias"] = WeightArray::from_vector(p.bias);
    w[prefix + "/bn_mean"] = WeightArray::from_vector(p.bn_mean);
    w[prefix + "/bn_var"] = WeightArray::from_vector(p.bn_var);
    w[prefix + "/bn_gamma"] = WeightArray::from_vector(p.bn_gamma);
    w[prefix + "/bn_beta"] = WeightArray::from_vector(p.bn_beta);
}

ConvBlockParams take_conv_block(WeightReader& r, const std::string& prefix, Act act,
                                float slope) {
    ConvBlockParams p;
    p.kernel = r.take_tensor(prefix + "/kernel");
    p.bias = r.take_vector(prefix + "/bias");
    p.bn_mean = r.take_vector(prefix + "/bn_mean");
    p.bn_var = r.take_vector(prefix + "/bn_var");
    p.bn_gamma = r.take_vector(prefix + "/bn_gamma");
    p.bn_beta = r.take_vector(prefix + "/bn_beta");
    p.act = act;
    p.act_slope = slope;
    return p;
}

void put_attention(ModelWeights& w, const std::string& prefix, const AttentionParams& p) {
    w[prefix + "/fc1"] = WeightArray::from_matrix(p.fc1);
    w[prefix + "/fc2"] = WeightArray::from_matrix(p.fc2);
}

AttentionParams take_attention(WeightReader& r, const std::string& prefix, PoolMode pooling) {
    AttentionParams p;
    p.fc1 = r.take_matrix(prefix + "/fc1");
    p.fc2 = r.take_matrix(prefix + "/fc2");
    if (p.fc1.rows < 1 || p.fc1.cols % p.fc1.rows != 0)
        throw FormatError("attention FC1 shape does not define a valid reduction: " + prefix);
    p.reduction = p.fc1.cols / p.fc1.rows;
    p.pooling = pooling;
    return p;
}

void put_non_local(ModelWeights& w, const std::string& prefix, const NonLocalParams& p) {
    put_conv_block(w, prefix + "/q", p.embed_q);
    put_conv_block(w, prefix + "/k", p.embed_k);
    put_conv_block(w, prefix + "/v", p.embed_v);
    put_conv_block(w, prefix + "/out", p.project_out);
}

NonLocalParams take_non_local(WeightReader& r, const std::string& prefix) {
    NonLocalParams p;
    p.embed_q = take_conv_block(r, prefix + "/q", Act::none, 0.0f);
    p.embed_k = take_conv_block(r, prefix + "/k", Act::none, 0.0f);
    p.embed_v = take_conv_block(r, prefix + "/v", Act::none, 0.0f);
    p.project_out = take_conv_block(r, prefix + "/out", Act::none, 0.0f);
    return p;
}

}  // namespace taat
