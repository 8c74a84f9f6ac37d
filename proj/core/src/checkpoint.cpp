#include "deqrb/checkpoint.hpp"

#include <fstream>
#include <sstream>

#include "json.hpp"

namespace deqrb {

using json = nlohmann::ordered_json;

namespace {

json tensor(std::size_t rows, std::size_t cols, const std::vector<double>& data) {
  json t;
  t["shape"] = cols == 0 ? json::array({rows}) : json::array({rows, cols});
  t["data"] = data;
  return t;
}

std::vector<double> read_tensor(const json& tensors, const char* name, std::vector<std::size_t> shape) {
  if (!tensors.contains(name)) throw FormatError(std::string("checkpoint: missing tensor '") + name + "'");
  const json& t = tensors.at(name);
  if (!t.contains("shape") || !t.contains("data")) {
    throw FormatError(std::string("checkpoint: tensor '") + name + "' needs shape and data");
  }
  if (t.at("shape").get<std::vector<std::size_t>>() != shape) {
    throw FormatError(std::string("checkpoint: tensor '") + name + "' has the wrong shape");
  }
  std::size_t count = 1;
  for (std::size_t s : shape) count *= s;
  auto data = t.at("data").get<std::vector<double>>();
  if (data.size() != count) throw FormatError(std::string("checkpoint: tensor '") + name + "' has the wrong length");
  return data;
}

}  // namespace

std::string checkpoint_to_json(const Checkpoint& ckpt) {
  const LayerParams& p = ckpt.params;
  const ModelDims dims = p.dims();
  json j;
  j["dims"] = {{"d", dims.d}, {"l", dims.l}, {"c", dims.c}};
  j["activation"] = to_string(p.activation);
  json& t = j["tensors"];
  t["W"] = tensor(dims.d, dims.d, p.W.values());
  t["U"] = tensor(dims.d, dims.l, p.U.values());
  t["b"] = tensor(dims.d, 0, p.b.values());
  t["V"] = tensor(dims.c, dims.d, p.V.values());
  t["r"] = tensor(dims.c, 0, p.r.values());
  j["defense"] = {{"kind", to_string(ckpt.defense.kind)}, {"n_star", ckpt.defense.n_star}};
  return j.dump(1) + "\n";
}

Checkpoint checkpoint_from_json(const std::string& text) {
  Checkpoint ck;
  try {
    const json j = json::parse(text);
    const json& dims = j.at("dims");
    const std::size_t d = dims.at("d").get<std::size_t>();
    const std::size_t l = dims.at("l").get<std::size_t>();
    const std::size_t c = dims.at("c").get<std::size_t>();
    if (d == 0 || l == 0 || c == 0) throw FormatError("checkpoint: zero dimension");
    LayerParams& p = ck.params;
    p.activation = activation_from_string(j.at("activation").get<std::string>());
    const json& t = j.at("tensors");
    p.W = Mat64(d, d, read_tensor(t, "W", {d, d}));
    p.U = Mat64(d, l, read_tensor(t, "U", {d, l}));
    p.b = Vec64(read_tensor(t, "b", {d}));
    p.V = Mat64(c, d, read_tensor(t, "V", {c, d}));
    p.r = Vec64(read_tensor(t, "r", {c}));
    if (j.contains("defense")) {
      const json& def = j.at("defense");
      const DefenseKind kind = defense_kind_from_string(def.at("kind").get<std::string>());
      const std::size_t n_star = def.value("n_star", std::size_t{0});
      if (kind == DefenseKind::Early) {
        ck.defense = n_star == 0 ? DefenseStrategy::uncalibrated_early() : DefenseStrategy::early(n_star);
      } else {
        ck.defense = kind == DefenseKind::Final ? DefenseStrategy::final_state() : DefenseStrategy::ensemble();
      }
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  try {
    ck.params.validate();
  } catch (const ContractViolation& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  return ck;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write checkpoint '" + path + "'");
  out << checkpoint_to_json(ckpt);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open checkpoint '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_json(ss.str());
}

}  // namespace deqrb
