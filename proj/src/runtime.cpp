#include "headlens/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace headlens {

namespace {

using json = nlohmann::json;

constexpr const char* kManifestFormat = "headlens-weights/1";

// Eight independent partial sums let the compiler vectorize without
// reassociating; the combination order is fixed, so results stay bit-stable.
float dot(const float* a, const float* b, int n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  int c = 0;
  for (; c + 8 <= n; c += 8)
    for (int k = 0; k < 8; ++k) acc[k] += a[c + k] * b[c + k];
  for (; c < n; ++c) acc[c & 7] += a[c] * b[c];
  return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
}

void matvec(const float* w, const float* x, int rows, int cols, float* y) {
  for (int r = 0; r < rows; ++r) y[r] = dot(w + static_cast<std::size_t>(r) * cols, x, cols);
}

float gelu(float x) {
  constexpr float k = 0.7978845608028654f;  // sqrt(2/pi)
  return 0.5f * x * (1.0f + std::tanh(k * (x + 0.044715f * x * x * x)));
}

std::size_t numel(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int s : shape) n *= static_cast<std::size_t>(s);
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <class E>
E parse_enum(const std::string& s, std::initializer_list<std::pair<const char*, E>> opts,
             const char* what) {
  for (auto& [name, val] : opts)
    if (s == name) return val;
  throw Error(std::string("unknown ") + what + " '" + s + "'");
}

json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},     {"n_heads", c.n_heads},
          {"d_model", c.d_model},       {"d_head", c.d_head},
          {"d_mlp", c.d_mlp},           {"vocab_size", c.vocab_size},
          {"max_seq_len", c.max_seq_len}, {"norm_epsilon", c.norm_epsilon},
          {"norm", to_string(c.norm)},  {"positional", to_string(c.positional)},
          {"activation", to_string(c.activation)}, {"tie_embeddings", c.tie_embeddings}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  try {
    c.n_layers = j.at("n_layers").get<int>();
    c.n_heads = j.at("n_heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.d_head = j.at("d_head").get<int>();
    c.d_mlp = j.at("d_mlp").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.norm_epsilon = j.value("norm_epsilon", 1e-5f);
    c.norm = parse_enum<NormKind>(j.value("norm", "rmsnorm"),
                                  {{"layernorm", NormKind::layernorm}, {"rmsnorm", NormKind::rmsnorm}},
                                  "norm");
    c.positional = parse_enum<PositionalKind>(
        j.value("positional", "learned"),
        {{"learned", PositionalKind::learned}, {"rope", PositionalKind::rope}}, "positional scheme");
    c.activation = parse_enum<Activation>(j.value("activation", "gelu"),
                                          {{"relu", Activation::relu}, {"gelu", Activation::gelu}},
                                          "activation");
    c.tie_embeddings = j.value("tie_embeddings", false);
  } catch (const json::exception& e) {
    throw Error(std::string("manifest config: ") + e.what());
  }
  return c;
}

std::span<const std::uint8_t> as_bytes(const std::vector<float>& v) {
  return {reinterpret_cast<const std::uint8_t*>(v.data()), v.size() * sizeof(float)};
}

}  // namespace

// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw Error(std::string("model config: ") + name + " must be >= 1");
  };
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(d_model, "d_model");
  positive(d_head, "d_head");
  positive(d_mlp, "d_mlp");
  positive(vocab_size, "vocab_size");
  positive(max_seq_len, "max_seq_len");
  if (!(norm_epsilon > 0.0f)) throw Error("model config: norm_epsilon must be > 0");
  if (n_heads * d_head != d_model)
    throw Error("model config: n_heads * d_head (" + std::to_string(n_heads * d_head) +
                ") != d_model (" + std::to_string(d_model) + ")");
  if (positional == PositionalKind::rope && d_head % 2 != 0)
    throw Error("model config: rope needs an even d_head");
}

std::string HeadLocator::str() const {
  return "L" + std::to_string(layer) + "H" + std::to_string(head);
}

void check_head(const ModelConfig& cfg, HeadLocator h) {
  if (h.layer < 0 || h.layer >= cfg.n_layers || h.head < 0 || h.head >= cfg.n_heads)
    throw Error("head " + h.str() + " out of bounds for " + std::to_string(cfg.n_layers) + "x" +
                std::to_string(cfg.n_heads) + " model");
}

std::string to_string(NormKind k) { return k == NormKind::layernorm ? "layernorm" : "rmsnorm"; }
std::string to_string(PositionalKind k) { return k == PositionalKind::learned ? "learned" : "rope"; }
std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "gelu"; }

std::uint64_t fnv1a(std::span<const std::uint8_t> bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string fnv1a_hex(std::span<const std::uint8_t> bytes) {
  static const char* digits = "0123456789abcdef";
  std::uint64_t h = fnv1a(bytes);
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i, h >>= 4) out[i] = digits[h & 0xf];
  return out;
}

// ---------------------------------------------------------------------------

ActivationRecord::ActivationRecord(std::string prompt_id, int n_layers, int n_heads, int d_model,
                                   std::vector<float> heads)
    : prompt_id_(std::move(prompt_id)),
      n_layers_(n_layers),
      n_heads_(n_heads),
      d_model_(d_model),
      heads_(std::move(heads)) {
  if (heads_.size() != static_cast<std::size_t>(n_layers) * n_heads * d_model)
    throw Error("activation record '" + prompt_id_ + "': expected " +
                std::to_string(static_cast<std::size_t>(n_layers) * n_heads * d_model) +
                " values, got " + std::to_string(heads_.size()));
}

std::span<const float> ActivationRecord::head(HeadLocator h) const {
  if (h.layer < 0 || h.layer >= n_layers_ || h.head < 0 || h.head >= n_heads_)
    throw Error("activation record '" + prompt_id_ + "' has no head " + h.str());
  std::size_t off = (static_cast<std::size_t>(h.layer) * n_heads_ + h.head) * d_model_;
  return std::span<const float>(heads_).subspan(off, d_model_);
}

std::span<const float> ActivationRecord::residual(int layer) const {
  if (!has_residuals() || layer < 0 || layer > n_layers_)
    throw Error("activation record '" + prompt_id_ + "' has no residual " + std::to_string(layer));
  return std::span<const float>(residual_).subspan(static_cast<std::size_t>(layer) * d_model_,
                                                   d_model_);
}

std::span<const float> ActivationRecord::mlp(int layer) const {
  if (!has_residuals() || layer < 0 || layer >= n_layers_)
    throw Error("activation record '" + prompt_id_ + "' has no mlp output " + std::to_string(layer));
  return std::span<const float>(mlp_).subspan(static_cast<std::size_t>(layer) * d_model_, d_model_);
}

void ActivationRecord::set_residuals(std::vector<float> residual, std::vector<float> mlp) {
  if (residual.size() != static_cast<std::size_t>(n_layers_ + 1) * d_model_ ||
      mlp.size() != static_cast<std::size_t>(n_layers_) * d_model_)
    throw Error("activation record '" + prompt_id_ + "': residual snapshot size mismatch");
  residual_ = std::move(residual);
  mlp_ = std::move(mlp);
}

// ---------------------------------------------------------------------------

std::vector<TensorSpec> tensor_layout(const ModelConfig& c) {
  std::vector<TensorSpec> out;
  const bool ln = c.norm == NormKind::layernorm;
  out.push_back({"tok_embed", {c.vocab_size, c.d_model}});
  if (c.positional == PositionalKind::learned) out.push_back({"pos_embed", {c.max_seq_len, c.d_model}});
  for (int l = 0; l < c.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    out.push_back({p + "ln1.weight", {c.d_model}});
    if (ln) out.push_back({p + "ln1.bias", {c.d_model}});
    out.push_back({p + "attn.wq", {c.d_model, c.d_model}});
    out.push_back({p + "attn.wk", {c.d_model, c.d_model}});
    out.push_back({p + "attn.wv", {c.d_model, c.d_model}});
    out.push_back({p + "attn.wo", {c.d_model, c.d_model}});
    out.push_back({p + "ln2.weight", {c.d_model}});
    if (ln) out.push_back({p + "ln2.bias", {c.d_model}});
    out.push_back({p + "mlp.w_in", {c.d_mlp, c.d_model}});
    out.push_back({p + "mlp.b_in", {c.d_mlp}, true});
    out.push_back({p + "mlp.w_out", {c.d_model, c.d_mlp}});
    out.push_back({p + "mlp.b_out", {c.d_model}, true});
  }
  out.push_back({"ln_f.weight", {c.d_model}});
  if (ln) out.push_back({"ln_f.bias", {c.d_model}});
  if (!c.tie_embeddings) out.push_back({"lm_head", {c.vocab_size, c.d_model}});
  return out;
}

Model Model::from_weights(ModelConfig cfg, WeightMap weights, Tokenizer tokenizer) {
  cfg.validate();
  if (tokenizer.size() != cfg.vocab_size)
    throw Error("tokenizer has " + std::to_string(tokenizer.size()) + " tokens, config declares " +
                std::to_string(cfg.vocab_size));
  for (const auto& spec : tensor_layout(cfg)) {
    auto it = weights.find(spec.name);
    if (it == weights.end()) {
      if (spec.optional) continue;
      throw Error("missing tensor '" + spec.name + "'");
    }
    if (it->second.size() != numel(spec.shape))
      throw Error("tensor '" + spec.name + "': expected " + std::to_string(numel(spec.shape)) +
                  " values for shape " + shape_str(spec.shape) + ", got " +
                  std::to_string(it->second.size()));
  }
  Model m;
  m.cfg_ = cfg;
  m.weights_ = std::make_shared<const WeightMap>(std::move(weights));
  m.tokenizer_ = std::move(tokenizer);
  m.bind();
  return m;
}

void Model::bind() {
  const WeightMap& w = *weights_;
  auto get = [&](const std::string& name) -> const float* {
    auto it = w.find(name);
    return it == w.end() ? nullptr : it->second.data();
  };
  tok_embed_ = get("tok_embed");
  pos_embed_ = get("pos_embed");
  lnf_w_ = get("ln_f.weight");
  lnf_b_ = get("ln_f.bias");
  lm_head_ = cfg_.tie_embeddings ? tok_embed_ : get("lm_head");
  blocks_.clear();
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    blocks_.push_back(Block{get(p + "ln1.weight"), get(p + "ln1.bias"), get(p + "attn.wq"),
                            get(p + "attn.wk"), get(p + "attn.wv"), get(p + "attn.wo"),
                            get(p + "ln2.weight"), get(p + "ln2.bias"), get(p + "mlp.w_in"),
                            get(p + "mlp.b_in"), get(p + "mlp.w_out"), get(p + "mlp.b_out")});
  }
}

Model Model::load(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  const auto blob_path = dir / "weights.bin";
  const auto vocab_path = dir / "vocab.json";
  for (const auto& p : {manifest_path, blob_path, vocab_path})
    if (!std::filesystem::exists(p)) throw Error("model file not found: " + p.string());

  json manifest;
  try {
    std::ifstream in(manifest_path);
    manifest = json::parse(in);
  } catch (const json::exception& e) {
    throw Error("manifest.json: " + std::string(e.what()));
  }
  if (manifest.value("format", "") != kManifestFormat)
    throw Error("manifest.json: unsupported format '" + manifest.value("format", "") + "'");
  ModelConfig cfg = config_from_json(manifest.at("config"));
  cfg.validate();

  std::string bos, unk;
  if (manifest.contains("special_tokens")) {
    bos = manifest["special_tokens"].value("bos", "");
    unk = manifest["special_tokens"].value("unk", "");
  }
  Tokenizer tok = Tokenizer::load(vocab_path, bos, unk);

  std::ifstream blob(blob_path, std::ios::binary);
  blob.seekg(0, std::ios::end);
  const auto blob_size = static_cast<std::uint64_t>(blob.tellg());

  std::map<std::string, json> entries;
  for (const auto& t : manifest.at("tensors")) entries[t.at("name").get<std::string>()] = t;

  WeightMap weights;
  for (const auto& spec : tensor_layout(cfg)) {
    auto it = entries.find(spec.name);
    if (it == entries.end()) {
      if (spec.optional) continue;
      throw Error("missing tensor '" + spec.name + "'");
    }
    const json& t = it->second;
    if (t.value("dtype", "") != "f32")
      throw Error("tensor '" + spec.name + "': dtype must be f32");
    auto shape = t.at("shape").get<std::vector<int>>();
    if (shape != spec.shape)
      throw Error("tensor '" + spec.name + "': shape " + shape_str(shape) + " does not match " +
                  shape_str(spec.shape));
    const auto offset = t.at("offset").get<std::uint64_t>();
    const std::uint64_t nbytes = numel(shape) * sizeof(float);
    if (offset + nbytes > blob_size)
      throw Error("tensor '" + spec.name + "': weights.bin is truncated (needs " +
                  std::to_string(offset + nbytes) + " bytes, has " + std::to_string(blob_size) + ")");
    std::vector<float> data(numel(shape));
    blob.seekg(static_cast<std::streamoff>(offset));
    blob.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(nbytes));
    if (!blob) throw Error("tensor '" + spec.name + "': read failed");
    if (fnv1a_hex(as_bytes(data)) != t.value("checksum", ""))
      throw Error("tensor '" + spec.name + "': checksum mismatch");
    weights.emplace(spec.name, std::move(data));
  }
  return from_weights(cfg, std::move(weights), std::move(tok));
}

void Model::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  json tensors = json::array();
  std::ofstream blob(dir / "weights.bin", std::ios::binary | std::ios::trunc);
  std::uint64_t offset = 0;
  for (const auto& spec : tensor_layout(cfg_)) {
    auto it = weights_->find(spec.name);
    if (it == weights_->end()) continue;
    const auto& data = it->second;
    blob.write(reinterpret_cast<const char*>(data.data()),
               static_cast<std::streamsize>(data.size() * sizeof(float)));
    tensors.push_back({{"name", spec.name},
                       {"shape", spec.shape},
                       {"dtype", "f32"},
                       {"offset", offset},
                       {"checksum", fnv1a_hex(as_bytes(data))}});
    offset += data.size() * sizeof(float);
  }
  if (!blob) throw Error("failed writing " + (dir / "weights.bin").string());
  json manifest = {{"format", kManifestFormat},
                   {"config", config_to_json(cfg_)},
                   {"special_tokens",
                    {{"bos", tokenizer_.bos_token()}, {"unk", tokenizer_.unk_token()}}},
                   {"tensors", tensors}};
  std::ofstream(dir / "manifest.json") << manifest.dump(1) << '\n';
  tokenizer_.save(dir / "vocab.json");
}

// ---------------------------------------------------------------------------

void Model::validate_hooks(std::span<const int> tokens, const HookSet& hooks) const {
  if (tokens.empty()) throw Error("forward: empty token sequence");
  if (static_cast<int>(tokens.size()) > cfg_.max_seq_len)
    throw Error("forward: sequence length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                std::to_string(cfg_.max_seq_len));
  for (int t : tokens)
    if (t < 0 || t >= cfg_.vocab_size) throw Error("forward: token id " + std::to_string(t) + " out of range");
  std::set<HeadLocator> seen;
  for (const auto& p : hooks.patches) {
    check_head(cfg_, p.head);
    if (!seen.insert(p.head).second) throw Error("duplicate patch for head " + p.head.str());
    if (static_cast<int>(p.value.size()) != cfg_.d_model)
      throw Error("patch for " + p.head.str() + " has length " + std::to_string(p.value.size()) +
                  ", expected d_model " + std::to_string(cfg_.d_model));
  }
  for (const auto& inj : hooks.injections) {
    if (inj.layer < 0 || inj.layer >= cfg_.n_layers)
      throw Error("injection layer " + std::to_string(inj.layer) + " out of range");
    if (static_cast<int>(inj.vector.size()) != cfg_.d_model)
      throw Error("injection vector has length " + std::to_string(inj.vector.size()) +
                  ", expected d_model " + std::to_string(cfg_.d_model));
    if (!std::isfinite(inj.alpha)) throw Error("injection alpha is not finite");
    for (float v : inj.vector)
      if (!std::isfinite(v)) throw Error("injection vector has non-finite entries");
  }
}

void Model::embed(int token, int pos, float* out) const {
  const int d = cfg_.d_model;
  const float* e = tok_embed_ + static_cast<std::size_t>(token) * d;
  if (pos_embed_) {
    const float* p = pos_embed_ + static_cast<std::size_t>(pos) * d;
    for (int i = 0; i < d; ++i) out[i] = e[i] + p[i];
  } else {
    std::copy(e, e + d, out);
  }
}

void Model::norm(const float* x, const float* w, const float* b, float* out) const {
  const int d = cfg_.d_model;
  if (cfg_.norm == NormKind::layernorm) {
    float mean = 0.0f;
    for (int i = 0; i < d; ++i) mean += x[i];
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (int i = 0; i < d; ++i) var += (x[i] - mean) * (x[i] - mean);
    var /= static_cast<float>(d);
    const float inv = 1.0f / std::sqrt(var + cfg_.norm_epsilon);
    for (int i = 0; i < d; ++i) out[i] = (x[i] - mean) * inv * w[i] + (b ? b[i] : 0.0f);
  } else {
    float ss = 0.0f;
    for (int i = 0; i < d; ++i) ss += x[i] * x[i];
    const float inv = 1.0f / std::sqrt(ss / static_cast<float>(d) + cfg_.norm_epsilon);
    for (int i = 0; i < d; ++i) out[i] = x[i] * inv * w[i];
  }
}

void Model::rope(float* vec, int pos) const {
  const int dh = cfg_.d_head;
  for (int h = 0; h < cfg_.n_heads; ++h) {
    float* v = vec + h * dh;
    for (int i = 0; i < dh / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * i / dh);
      const double ang = pos * freq;
      const float c = static_cast<float>(std::cos(ang));
      const float s = static_cast<float>(std::sin(ang));
      const float a = v[2 * i];
      const float b = v[2 * i + 1];
      v[2 * i] = a * c - b * s;
      v[2 * i + 1] = a * s + b * c;
    }
  }
}

void Model::mlp(const Block& blk, const float* x, float* out) const {
  const int d = cfg_.d_model;
  const int m = cfg_.d_mlp;
  std::vector<float> hidden(m);
  matvec(blk.w_in, x, m, d, hidden.data());
  for (int i = 0; i < m; ++i) {
    float v = hidden[i] + (blk.b_in ? blk.b_in[i] : 0.0f);
    hidden[i] = cfg_.activation == Activation::relu ? std::max(v, 0.0f) : gelu(v);
  }
  matvec(blk.w_out, hidden.data(), d, m, out);
  if (blk.b_out)
    for (int i = 0; i < d; ++i) out[i] += blk.b_out[i];
}

void Model::attend(const Block& blk, int pos, const float* q, const float* keys,
                   const float* values, const float* last_key, const float* last_value,
                   float* head_out) const {
  const int d = cfg_.d_model;
  const int dh = cfg_.d_head;
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<float> scores(pos + 1);
  std::vector<float> z(dh);
  for (int h = 0; h < cfg_.n_heads; ++h) {
    const int off = h * dh;
    float mx = -INFINITY;
    for (int j = 0; j <= pos; ++j) {
      const float* k = (j == pos ? last_key : keys + static_cast<std::size_t>(j) * d) + off;
      scores[j] = dot(q + off, k, dh) * scale;
      mx = std::max(mx, scores[j]);
    }
    float total = 0.0f;
    for (int j = 0; j <= pos; ++j) {
      scores[j] = std::exp(scores[j] - mx);
      total += scores[j];
    }
    std::fill(z.begin(), z.end(), 0.0f);
    for (int j = 0; j <= pos; ++j) {
      const float* v = (j == pos ? last_value : values + static_cast<std::size_t>(j) * d) + off;
      const float a = scores[j] / total;
      for (int i = 0; i < dh; ++i) z[i] += a * v[i];
    }
    // Head contribution: columns [off, off + dh) of the output projection.
    float* out = head_out + static_cast<std::size_t>(h) * d;
    for (int r = 0; r < d; ++r) {
      const float* row = blk.wo + static_cast<std::size_t>(r) * d + off;
      float acc = 0.0f;
      for (int i = 0; i < dh; ++i) acc += row[i] * z[i];
      out[r] = acc;
    }
  }
}

void Model::finish(const float* h, ForwardResult& out) const {
  const int d = cfg_.d_model;
  const int V = cfg_.vocab_size;
  std::vector<float> x(d);
  norm(h, lnf_w_, lnf_b_, x.data());
  out.logits.assign(V, 0.0f);
  matvec(lm_head_, x.data(), V, d, out.logits.data());
  const float mx = *std::max_element(out.logits.begin(), out.logits.end());
  double total = 0.0;
  std::vector<double> e(V);
  for (int i = 0; i < V; ++i) {
    e[i] = std::exp(static_cast<double>(out.logits[i]) - mx);
    total += e[i];
  }
  out.probs.resize(V);
  for (int i = 0; i < V; ++i) out.probs[i] = static_cast<float>(e[i] / total);
}

ForwardResult Model::run(std::span<const int> tokens, const HookSet& hooks, Trace* trace) const {
  validate_hooks(tokens, hooks);
  const int T = static_cast<int>(tokens.size());
  const int d = cfg_.d_model;
  const int H = cfg_.n_heads;
  const int L = cfg_.n_layers;
  const int last = T - 1;

  std::vector<float> h(static_cast<std::size_t>(T) * d);
  for (int t = 0; t < T; ++t) embed(tokens[t], t, &h[static_cast<std::size_t>(t) * d]);

  const bool capture = hooks.capture_heads || hooks.capture_residuals || trace;
  std::vector<float> captured(capture ? static_cast<std::size_t>(L) * H * d : 0);
  std::vector<float> resid, mlp_out;
  if (hooks.capture_residuals) {
    resid.resize(static_cast<std::size_t>(L + 1) * d);
    mlp_out.resize(static_cast<std::size_t>(L) * d);
  }
  if (trace) {
    trace->tokens_.assign(tokens.begin(), tokens.end());
    trace->keys_.assign(L, {});
    trace->values_.assign(L, {});
    trace->last_residual_.assign(L + 1, {});
  }

  std::vector<float> x(static_cast<std::size_t>(T) * d), q(static_cast<std::size_t>(T) * d),
      k(static_cast<std::size_t>(T) * d), v(static_cast<std::size_t>(T) * d);
  std::vector<float> heads(static_cast<std::size_t>(H) * d), m(d), xn(d);

  for (int l = 0; l < L; ++l) {
    const Block& blk = blocks_[l];
    float* hl = &h[static_cast<std::size_t>(last) * d];
    if (hooks.capture_residuals) std::copy(hl, hl + d, &resid[static_cast<std::size_t>(l) * d]);
    if (trace) trace->last_residual_[l].assign(hl, hl + d);

    for (int t = 0; t < T; ++t) {
      const std::size_t o = static_cast<std::size_t>(t) * d;
      norm(&h[o], blk.ln1_w, blk.ln1_b, &x[o]);
      matvec(blk.wq, &x[o], d, d, &q[o]);
      matvec(blk.wk, &x[o], d, d, &k[o]);
      matvec(blk.wv, &x[o], d, d, &v[o]);
      if (cfg_.positional == PositionalKind::rope) {
        rope(&q[o], t);
        rope(&k[o], t);
      }
    }
    for (int t = 0; t < T; ++t) {
      const std::size_t o = static_cast<std::size_t>(t) * d;
      attend(blk, t, &q[o], k.data(), v.data(), &k[o], &v[o], heads.data());
      if (t == last) {
        for (const auto& p : hooks.patches)
          if (p.head.layer == l)
            std::copy(p.value.begin(), p.value.end(), &heads[static_cast<std::size_t>(p.head.head) * d]);
        if (capture)
          std::copy(heads.begin(), heads.end(), &captured[static_cast<std::size_t>(l) * H * d]);
      }
      for (int j = 0; j < H; ++j) {
        const float* c = &heads[static_cast<std::size_t>(j) * d];
        for (int i = 0; i < d; ++i) h[o + i] += c[i];
      }
      norm(&h[o], blk.ln2_w, blk.ln2_b, xn.data());
      mlp(blk, xn.data(), m.data());
      for (int i = 0; i < d; ++i) h[o + i] += m[i];
      if (t == last && hooks.capture_residuals)
        std::copy(m.begin(), m.end(), &mlp_out[static_cast<std::size_t>(l) * d]);
    }
    for (const auto& inj : hooks.injections)
      if (inj.layer == l)
        for (int i = 0; i < d; ++i) hl[i] += inj.alpha * inj.vector[i];
    if (trace) {
      trace->keys_[l] = k;
      trace->values_[l] = v;
    }
  }

  ForwardResult out;
  const float* hf = &h[static_cast<std::size_t>(last) * d];
  if (hooks.capture_residuals) std::copy(hf, hf + d, &resid[static_cast<std::size_t>(L) * d]);
  if (trace) trace->last_residual_[L].assign(hf, hf + d);
  finish(hf, out);
  if (capture) {
    out.record = ActivationRecord("", L, H, d, std::move(captured));
    if (hooks.capture_residuals) out.record->set_residuals(std::move(resid), std::move(mlp_out));
  }
  return out;
}

ForwardResult Model::forward(std::span<const int> tokens, const HookSet& hooks) const {
  ForwardResult r = run(tokens, hooks, nullptr);
  if (!hooks.capture_heads && !hooks.capture_residuals) r.record.reset();
  return r;
}

std::vector<float> Model::forward_with_patch(std::span<const int> tokens,
                                             const std::vector<HeadPatch>& patches) const {
  HookSet hooks;
  hooks.patches = patches;
  return run(tokens, hooks, nullptr).probs;
}

std::vector<float> Model::forward_with_injection(std::span<const int> tokens, int layer,
                                                 std::span<const float> vec, float alpha) const {
  HookSet hooks;
  hooks.injections.push_back(Injection{layer, std::vector<float>(vec.begin(), vec.end()), alpha});
  return run(tokens, hooks, nullptr).probs;
}

Trace Model::trace(std::span<const int> tokens, bool capture_heads) const {
  Trace t;
  t.base_ = run(tokens, HookSet{}, &t);
  if (!capture_heads) t.base_.record.reset();
  return t;
}

ForwardResult Model::resume(const Trace& tr, const HookSet& hooks) const {
  if (hooks.capture_residuals) throw Error("resume: residual capture needs a full forward pass");
  validate_hooks(tr.tokens_, hooks);
  const int L = cfg_.n_layers;
  const int H = cfg_.n_heads;
  const int d = cfg_.d_model;
  const int last = static_cast<int>(tr.tokens_.size()) - 1;

  int start = L;
  for (const auto& p : hooks.patches) start = std::min(start, p.head.layer);
  for (const auto& inj : hooks.injections) start = std::min(start, inj.layer + 1);
  if (hooks.patches.empty() && hooks.injections.empty()) {
    ForwardResult copy = tr.base_;
    if (!hooks.capture_heads) copy.record.reset();
    return copy;
  }

  std::vector<float> captured;
  if (hooks.capture_heads) {
    if (!tr.base_.record) throw Error("resume: trace was taken without head capture");
    auto base = tr.base_.record->all_heads();
    captured.assign(base.begin(), base.end());
  }

  std::vector<float> h = tr.last_residual_[start];
  // Injections before `start` were applied after block start-1, i.e. on the
  // stream entering `start`.
  for (const auto& inj : hooks.injections)
    if (inj.layer == start - 1)
      for (int i = 0; i < d; ++i) h[i] += inj.alpha * inj.vector[i];

  std::vector<float> x(d), q(d), k(d), v(d), xn(d), m(d), heads(static_cast<std::size_t>(H) * d);
  for (int l = start; l < L; ++l) {
    const Block& blk = blocks_[l];
    norm(h.data(), blk.ln1_w, blk.ln1_b, x.data());
    matvec(blk.wq, x.data(), d, d, q.data());
    matvec(blk.wk, x.data(), d, d, k.data());
    matvec(blk.wv, x.data(), d, d, v.data());
    if (cfg_.positional == PositionalKind::rope) {
      rope(q.data(), last);
      rope(k.data(), last);
    }
    attend(blk, last, q.data(), tr.keys_[l].data(), tr.values_[l].data(), k.data(), v.data(),
           heads.data());
    for (const auto& p : hooks.patches)
      if (p.head.layer == l)
        std::copy(p.value.begin(), p.value.end(), &heads[static_cast<std::size_t>(p.head.head) * d]);
    if (hooks.capture_heads)
      std::copy(heads.begin(), heads.end(), &captured[static_cast<std::size_t>(l) * H * d]);
    for (int j = 0; j < H; ++j) {
      const float* c = &heads[static_cast<std::size_t>(j) * d];
      for (int i = 0; i < d; ++i) h[i] += c[i];
    }
    norm(h.data(), blk.ln2_w, blk.ln2_b, xn.data());
    mlp(blk, xn.data(), m.data());
    for (int i = 0; i < d; ++i) h[i] += m[i];
    for (const auto& inj : hooks.injections)
      if (inj.layer == l)
        for (int i = 0; i < d; ++i) h[i] += inj.alpha * inj.vector[i];
  }

  ForwardResult out;
  finish(h.data(), out);
  if (hooks.capture_heads) out.record = ActivationRecord("", L, H, d, std::move(captured));
  return out;
}

}  // namespace headlens
