#include "atd/model.hpp"

#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>

namespace atd {

using nlohmann::json;

// Configuration --------------------------------------------------------------

ModelConfig ModelConfig::preset_config(const std::string& name) {
  ModelConfig c;
  c.preset = name;
  if (name == "micro") return c;
  if (name == "light") {
    c.channels = 48, c.blocks = 4, c.layers = 3, c.dict_size = 256, c.reduced_dim = 12;
    c.window = 16, c.group_size = 128, c.heads = 3, c.scale = 4;
    return c;
  }
  if (name == "full") {
    c.channels = 216, c.blocks = 6, c.layers = 6, c.dict_size = 512, c.reduced_dim = 20;
    c.window = 16, c.group_size = 256, c.heads = 4, c.scale = 4;
    return c;
  }
  throw Error("unknown preset '" + name + "' (expected micro, light or full)");
}

namespace {

std::size_t positive(const json& j, const char* key) {
  if (!j.is_number_integer() || j.get<long long>() <= 0) {
    throw Error(std::string("config: '") + key + "' must be a positive integer");
  }
  return j.get<std::size_t>();
}

std::string scale_mode_name(ScaleMode m) { return m == ScaleMode::kPlain ? "plain" : "reparameterized"; }

}  // namespace

ModelConfig ModelConfig::from_json(const json& j, const ModelConfig& base) {
  if (!j.is_object()) throw Error("config: model section must be an object");
  ModelConfig c = j.contains("preset") ? preset_config(j.at("preset").get<std::string>()) : base;
  for (const auto& [key, v] : j.items()) {
    if (key == "preset") continue;
    else if (key == "channels") c.channels = positive(v, "channels");
    else if (key == "blocks") c.blocks = positive(v, "blocks");
    else if (key == "layers") c.layers = positive(v, "layers");
    else if (key == "dict_size") c.dict_size = positive(v, "dict_size");
    else if (key == "reduced_dim") c.reduced_dim = positive(v, "reduced_dim");
    else if (key == "window") c.window = positive(v, "window");
    else if (key == "group_size") c.group_size = positive(v, "group_size");
    else if (key == "heads") c.heads = positive(v, "heads");
    else if (key == "scale") c.scale = positive(v, "scale");
    else if (key == "use_tdca") c.use_tdca = v.get<bool>();
    else if (key == "use_acmsa") c.use_acmsa = v.get<bool>();
    else if (key == "use_category_ffn") c.use_category_ffn = v.get<bool>();
    else if (key == "variant") c.set_variant(v.get<std::string>());
    else if (key == "scale_mode") {
      const auto s = v.get<std::string>();
      if (s == "reparameterized") c.scale_mode = ScaleMode::kReparameterized;
      else if (s == "plain") c.scale_mode = ScaleMode::kPlain;
      else throw Error("config: scale_mode must be 'reparameterized' or 'plain'");
    } else {
      throw Error("config: unknown model key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

ModelConfig ModelConfig::from_json(const json& j) { return from_json(j, ModelConfig{}); }

json ModelConfig::to_json() const {
  return {{"preset", preset},
          {"channels", channels},
          {"blocks", blocks},
          {"layers", layers},
          {"dict_size", dict_size},
          {"reduced_dim", reduced_dim},
          {"window", window},
          {"group_size", group_size},
          {"heads", heads},
          {"scale", scale},
          {"use_tdca", use_tdca},
          {"use_acmsa", use_acmsa},
          {"use_category_ffn", use_category_ffn},
          {"scale_mode", scale_mode_name(scale_mode)}};
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw Error("config: " + m); };
  if (channels == 0 || heads == 0 || channels % heads != 0) fail("channels must be divisible by heads");
  if (channels % 2 != 0) fail("channels must be even");
  if (window == 0 || window % 2 != 0) fail("window must be even");
  if (scale < 2 || scale > 4) fail("scale must be 2, 3 or 4");
  if (reduced_dim == 0 || reduced_dim > channels) fail("reduced_dim must lie in [1, channels]");
  if (dict_size == 0 || group_size == 0 || blocks == 0 || layers == 0) fail("sizes must be positive");
}

std::string ModelConfig::variant() const {
  if (!use_tdca && !use_acmsa && !use_category_ffn) return "baseline";
  if (use_tdca && !use_acmsa && !use_category_ffn) return "tdca";
  if (use_tdca && use_acmsa && !use_category_ffn) return "tdca_acmsa";
  if (use_tdca && use_acmsa && use_category_ffn) return "full";
  return "custom";
}

void ModelConfig::set_variant(const std::string& name) {
  if (name == "baseline") use_tdca = use_acmsa = use_category_ffn = false;
  else if (name == "tdca") use_tdca = true, use_acmsa = use_category_ffn = false;
  else if (name == "tdca_acmsa") use_tdca = use_acmsa = true, use_category_ffn = false;
  else if (name == "full") use_tdca = use_acmsa = use_category_ffn = true;
  else throw Error("unknown variant '" + name + "' (expected baseline, tdca, tdca_acmsa or full)");
}

// Construction ----------------------------------------------------------------

std::vector<std::size_t> upsample_factors(std::size_t scale) {
  switch (scale) {
    case 2: return {2};
    case 3: return {3};
    case 4: return {2, 2};
    default: throw Error("unsupported SR scale " + std::to_string(scale));
  }
}

AtdModel AtdModel::create(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  const std::size_t c = config.channels;
  AtdModel m;
  m.config = config;
  m.shallow = Conv2d::create(3, 3, c, rng);
  for (std::size_t b = 0; b < config.blocks; ++b) {
    AtdBlock block;
    block.entries = Tensor::randn({config.dict_size, c}, 0.02f, rng, true);
    for (std::size_t l = 0; l < config.layers; ++l) {
      AtdLayer layer;
      layer.dict = TokenDictionary::attach(block.entries, config.reduced_dim, rng, config.scale_mode);
      layer.norm_tdca = LayerNorm::create(c);
      layer.norm_acmsa = LayerNorm::create(c);
      layer.norm_window = LayerNorm::create(c);
      layer.acmsa = AcmsaParams::create(c, config.heads, rng);
      layer.window = WindowParams::create(c, config.window, l % 2 ? config.window / 2 : 0, config.heads, rng);
      layer.ffn = CffnParams::create(c, config.use_category_ffn, rng);
      block.layers.push_back(std::move(layer));
    }
    block.conv = Conv2d::create(3, c, c, rng);
    m.blocks.push_back(std::move(block));
  }
  m.body = Conv2d::create(3, c, c, rng);
  m.recon_in = Conv2d::create(3, c, c, rng);
  for (std::size_t f : upsample_factors(config.scale)) m.upsample.push_back(Conv2d::create(3, c, f * f * c, rng));
  m.recon_out = Conv2d::create(3, c, 3, rng);
  return m;
}

std::vector<NamedTensor> AtdModel::parameters() const {
  std::vector<NamedTensor> out;
  shallow.collect(out, "shallow");
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string bp = "blocks." + std::to_string(b);
    const auto& block = blocks[b];
    if (config.needs_dictionary()) out.push_back({bp + ".entries", block.entries});
    for (std::size_t l = 0; l < block.layers.size(); ++l) {
      const std::string lp = bp + ".layers." + std::to_string(l);
      const auto& layer = block.layers[l];
      if (config.needs_dictionary()) {
        layer.dict.query.collect(out, lp + ".tdca.query");
        layer.dict.key.collect(out, lp + ".tdca.key");
        if (config.use_tdca) layer.dict.value.collect(out, lp + ".tdca.value");
        out.push_back({lp + ".tdca.tau", layer.dict.tau});
        layer.norm_tdca.collect(out, lp + ".norm_tdca");
      }
      if (config.use_acmsa) {
        layer.norm_acmsa.collect(out, lp + ".norm_acmsa");
        layer.acmsa.collect(out, lp + ".acmsa");
      }
      layer.norm_window.collect(out, lp + ".norm_window");
      layer.window.collect(out, lp + ".window");
      layer.ffn.collect(out, lp + ".ffn");
    }
    block.conv.collect(out, bp + ".conv");
  }
  body.collect(out, "body");
  recon_in.collect(out, "recon_in");
  for (std::size_t i = 0; i < upsample.size(); ++i) upsample[i].collect(out, "upsample." + std::to_string(i));
  recon_out.collect(out, "recon_out");
  return out;
}

std::size_t AtdModel::count_params() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

// Forward ----------------------------------------------------------------------

Tensor atd_layer(const Tensor& x, const AtdLayer& layer, const ModelConfig& config, LayerTrace* trace,
                 bool replay) {
  if (x.rank() != 3 || x.dim(2) != config.channels) {
    throw ShapeError("atd_layer: features " + shape_str(x.shape()) + " do not have " +
                     std::to_string(config.channels) + " channels");
  }
  const std::size_t n = x.dim(0) * x.dim(1);
  const Tensor tokens = reshape(x, {n, x.dim(2)});
  Tensor out = x;
  std::vector<int> idx;
  if (config.needs_dictionary()) {
    TdcaOutput t = tdca(layer.norm_tdca(tokens), layer.dict);
    if (replay) {
      if (!trace || trace->argmax_idx.size() != n) throw Error("atd_layer: replay trace does not match token count");
      idx = trace->argmax_idx;
    } else {
      idx = t.argmax_idx;
      if (trace) {
        trace->argmax_idx = t.argmax_idx;
        trace->max_weight = t.max_weight;
        trace->grid_h = x.dim(0);
        trace->grid_w = x.dim(1);
      }
    }
    if (config.use_tdca) out = add(out, reshape(t.enhanced, x.shape()));
    if (config.use_acmsa) {
      Tensor y = acmsa(layer.norm_acmsa(tokens), make_assignment(idx, config.group_size), layer.acmsa);
      out = add(out, reshape(y, x.shape()));
    }
  }
  out = add(out, swmsa(layer.norm_window(x), layer.window));
  Tensor delta;
  if (config.use_category_ffn) delta = reshape(select_embedding(layer.dict.entries, idx), x.shape());
  return cffn(out, delta, layer.ffn);
}

Tensor forward_sr(const Tensor& img, const AtdModel& model, ForwardTrace* trace) {
  const auto& cfg = model.config;
  if (img.rank() != 3 || img.dim(2) != 3) throw ShapeError("forward_sr: expected H x W x 3, got " + shape_str(img.shape()));
  const std::size_t h = img.dim(0), w = img.dim(1), win = cfg.window;
  if (h < win || w < win) {
    throw ShapeError("forward_sr: input " + std::to_string(h) + "x" + std::to_string(w) +
                     " is smaller than one " + std::to_string(win) + "x" + std::to_string(win) + " window");
  }
  const std::size_t pad_h = (win - h % win) % win, pad_w = (win - w % win) % win;
  const bool replay = trace && trace->replay;
  if (trace && !replay) trace->layers.clear();
  std::size_t layer_no = 0;

  Tensor f0 = model.shallow(reflect_pad(img, pad_h, pad_w));
  Tensor f = f0;
  for (const auto& block : model.blocks) {
    Tensor y = f;
    for (const auto& layer : block.layers) {
      LayerTrace* lt = nullptr;
      if (trace) {
        if (!replay) trace->layers.emplace_back();
        if (layer_no >= trace->layers.size()) throw Error("forward_sr: replay trace has too few layers");
        lt = &trace->layers[layer_no];
      }
      y = atd_layer(y, layer, cfg, lt, replay);
      ++layer_no;
    }
    f = add(f, block.conv(y));
  }
  f = add(model.body(f), f0);
  Tensor up = model.recon_in(f);
  const auto factors = upsample_factors(cfg.scale);
  for (std::size_t i = 0; i < factors.size(); ++i) up = pixel_shuffle(model.upsample[i](up), factors[i]);
  return crop(model.recon_out(up), cfg.scale * h, cfg.scale * w);
}

std::uint64_t tensor_hash(const Tensor& t) {
  std::uint64_t hash = 1469598103934665603ull;
  for (float v : t.data()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    for (int i = 0; i < 4; ++i) {
      hash ^= (bits >> (8 * i)) & 0xffu;
      hash *= 1099511628211ull;
    }
  }
  return hash;
}

// Checkpoints --------------------------------------------------------------------

namespace {

constexpr char kMagic[4] = {'A', 'T', 'D', 'C'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const std::string& in, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(in[at + i])) << (8 * i);
  return v;
}

std::string dims_str(const Shape& s) {
  std::string r;
  for (std::size_t i = 0; i < s.size(); ++i) r += (i ? "x" : "") + std::to_string(s[i]);
  return r;
}

}  // namespace

void save_checkpoint(const std::string& path, const AtdModel& model) {
  std::string header = "config " + model.config.to_json().dump() + "\n";
  std::string payload;
  for (const auto& p : model.parameters()) {
    header += "tensor " + p.name + " " + dims_str(p.tensor.shape()) + " " + std::to_string(payload.size()) + "\n";
    for (float v : p.tensor.data()) {
      std::uint32_t bits;
      std::memcpy(&bits, &v, 4);
      put_u32(payload, bits);
    }
  }
  std::string file(kMagic, 4);
  put_u32(file, kCheckpointVersion);
  put_u32(file, static_cast<std::uint32_t>(header.size()));
  file += header;
  file += payload;
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("checkpoint: cannot open " + path + " for writing");
  os.write(file.data(), static_cast<std::streamsize>(file.size()));
  if (!os) throw Error("checkpoint: write to " + path + " failed");
}

AtdModel load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("checkpoint: cannot open " + path);
  const std::string file((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (file.size() < 12 || std::memcmp(file.data(), kMagic, 4) != 0) {
    throw Error("checkpoint: " + path + " has bad magic bytes (expected ATDC)");
  }
  const std::uint32_t version = get_u32(file, 4);
  if (version != kCheckpointVersion) {
    throw Error("checkpoint: unsupported format version " + std::to_string(version));
  }
  const std::size_t header_len = get_u32(file, 8);
  if (12 + header_len > file.size()) throw Error("checkpoint: truncated header");
  std::istringstream header(file.substr(12, header_len));
  const std::string payload = file.substr(12 + header_len);

  std::optional<ModelConfig> config;
  struct Entry {
    std::string dims;
    std::size_t offset;
  };
  std::map<std::string, Entry> entries;
  std::string line;
  while (std::getline(header, line)) {
    if (line.rfind("config ", 0) == 0) {
      config = ModelConfig::from_json(json::parse(line.substr(7)));
    } else if (line.rfind("tensor ", 0) == 0) {
      std::istringstream ls(line.substr(7));
      std::string name, dims;
      std::size_t offset = 0;
      if (!(ls >> name >> dims >> offset)) throw Error("checkpoint: malformed tensor line '" + line + "'");
      entries[name] = {dims, offset};
    } else if (!line.empty()) {
      throw Error("checkpoint: unexpected header line '" + line + "'");
    }
  }
  if (!config) throw Error("checkpoint: header has no config line");
  AtdModel model = AtdModel::create(*config, 0);
  const auto params = model.parameters();
  if (params.size() != entries.size()) {
    throw Error("checkpoint: holds " + std::to_string(entries.size()) + " tensors, model expects " +
                std::to_string(params.size()));
  }
  for (const auto& p : params) {
    auto it = entries.find(p.name);
    if (it == entries.end()) throw Error("checkpoint: missing tensor " + p.name);
    if (it->second.dims != dims_str(p.tensor.shape())) {
      throw Error("checkpoint: tensor " + p.name + " has shape " + it->second.dims + ", expected " +
                  dims_str(p.tensor.shape()));
    }
    const std::size_t bytes = p.tensor.numel() * 4;
    if (it->second.offset + bytes > payload.size()) throw Error("checkpoint: payload truncated at " + p.name);
    Tensor target = p.tensor;
    auto dst = target.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i) {
      const std::uint32_t bits = get_u32(payload, it->second.offset + 4 * i);
      std::memcpy(&dst[i], &bits, 4);
    }
  }
  return model;
}

}  // namespace atd
