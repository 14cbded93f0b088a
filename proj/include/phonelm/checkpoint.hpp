#pragma once

#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "phonelm/errors.hpp"
#include "phonelm/model.hpp"
#include "phonelm/optimizer.hpp"

namespace phonelm {

inline constexpr uint32_t kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[4] = {'P', 'B', 'R', 'T'};

namespace ckpt_detail {

inline void write_bytes(std::ostream& out, const void* p, size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}
template <typename T>
void write_pod(std::ostream& out, T v) {
  write_bytes(out, &v, sizeof(T));  // little-endian host
}
inline void read_bytes(std::istream& in, void* p, size_t n,
                       const char* what) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in.gcount()) != n) {
    throw FormatError(std::string("truncated checkpoint while reading ") +
                      what);
  }
}
template <typename T>
T read_pod(std::istream& in, const char* what) {
  T v;
  read_bytes(in, &v, sizeof(T), what);
  return v;
}

inline void write_tensor(std::ostream& out, const std::string& name,
                         const Tensor32& t) {
  write_pod<uint32_t>(out, static_cast<uint32_t>(name.size()));
  write_bytes(out, name.data(), name.size());
  write_pod<uint32_t>(out, static_cast<uint32_t>(t.rank()));
  for (size_t d : t.shape()) write_pod<uint64_t>(out, d);
  write_bytes(out, t.data(), t.size() * sizeof(float));
}

inline std::pair<std::string, Tensor32> read_tensor(std::istream& in) {
  const auto name_len = read_pod<uint32_t>(in, "tensor name length");
  std::string name(name_len, '\0');
  read_bytes(in, name.data(), name_len, "tensor name");
  const auto rank = read_pod<uint32_t>(in, "tensor rank");
  std::vector<size_t> shape(rank);
  for (auto& d : shape) {
    d = static_cast<size_t>(read_pod<uint64_t>(in, "tensor dims"));
  }
  Tensor32 t(shape);
  read_bytes(in, t.data(), t.size() * sizeof(float), "tensor data");
  return {std::move(name), std::move(t)};
}

}  // namespace ckpt_detail

// Serialized training state. Binary layout: magic "PBRT", u32 format
// version, u64 JSON header length + header, u64 tensor count, then named
// tensors as (u32 name length, name, u32 rank, u64 dims..., f32 data,
// little endian). Model weights and Adam moments ride in the same tensor
// section; moments are prefixed "adam.m." / "adam.v.".
struct Checkpoint {
  uint32_t format_version = kCheckpointVersion;
  ModelWeights weights;
  std::string mode = "pretrain_joint";
  std::string phoneme_source = "stored";
  uint64_t seed = 0;
  size_t max_len = 128;
  double mask_prob = 0.15;

  uint64_t epoch = 0;            // next epoch to run
  uint64_t batch_in_epoch = 0;   // next batch within that epoch
  uint64_t step = 0;             // batches processed so far
  uint64_t total_steps_planned = 0;

  double best_val_accuracy = -1.0;
  double best_val_macro_f1 = -1.0;
  int64_t best_epoch = -1;

  std::array<uint64_t, 4> rng_state{};

  AdamConfig adam_cfg;
  uint64_t adam_step = 0;
  std::map<std::string, std::pair<Tensor32, Tensor32>> adam_moments;

  void save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path);

    nlohmann::json header;
    header["model"] = weights.cfg.to_json();
    header["num_classes"] = weights.num_classes;
    header["mode"] = mode;
    header["phoneme_source"] = phoneme_source;
    header["seed"] = seed;
    header["max_len"] = max_len;
    header["mask_prob"] = mask_prob;
    header["counters"] = {{"epoch", epoch},
                          {"batch_in_epoch", batch_in_epoch},
                          {"step", step},
                          {"total_steps_planned", total_steps_planned}};
    header["best"] = {{"val_accuracy", best_val_accuracy},
                      {"val_macro_f1", best_val_macro_f1},
                      {"epoch", best_epoch}};
    header["rng_state"] = rng_state;
    header["adam"] = {{"lr", adam_cfg.lr},
                      {"beta1", adam_cfg.beta1},
                      {"beta2", adam_cfg.beta2},
                      {"eps", adam_cfg.eps},
                      {"step", adam_step}};
    const std::string hs = header.dump();

    ckpt_detail::write_bytes(out, kCheckpointMagic, 4);
    ckpt_detail::write_pod<uint32_t>(out, format_version);
    ckpt_detail::write_pod<uint64_t>(out, hs.size());
    ckpt_detail::write_bytes(out, hs.data(), hs.size());

    uint64_t count = 0;
    weights.p.for_each(
        [&](const std::string&, const Tensor32&) { ++count; });
    count += 2 * adam_moments.size();
    ckpt_detail::write_pod<uint64_t>(out, count);
    weights.p.for_each([&](const std::string& name, const Tensor32& t) {
      ckpt_detail::write_tensor(out, name, t);
    });
    for (const auto& [name, mv] : adam_moments) {
      ckpt_detail::write_tensor(out, "adam.m." + name, mv.first);
      ckpt_detail::write_tensor(out, "adam.v." + name, mv.second);
    }
    if (!out) throw IoError("write failure: " + path);
  }

  static Checkpoint load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint: " + path);

    char magic[4];
    ckpt_detail::read_bytes(in, magic, 4, "magic");
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
      throw FormatError("not a checkpoint file (bad magic): " + path);
    }
    const auto version = ckpt_detail::read_pod<uint32_t>(in, "version");
    if (version != kCheckpointVersion) {
      throw FormatError("unsupported checkpoint format version " +
                        std::to_string(version) + " (expected " +
                        std::to_string(kCheckpointVersion) + ")");
    }
    const auto header_len =
        ckpt_detail::read_pod<uint64_t>(in, "header length");
    std::string hs(header_len, '\0');
    ckpt_detail::read_bytes(in, hs.data(), header_len, "header");
    nlohmann::json header = nlohmann::json::parse(hs, nullptr, false);
    if (header.is_discarded()) {
      throw FormatError("checkpoint header is not valid JSON");
    }

    Checkpoint c;
    try {
      c.format_version = version;
      const auto model_cfg = ModelConfig::from_json(header.at("model"));
      const auto num_classes = header.at("num_classes").get<size_t>();
      c.weights = ModelWeights::init(model_cfg, num_classes);
      c.mode = header.at("mode").get<std::string>();
      c.phoneme_source = header.at("phoneme_source").get<std::string>();
      c.seed = header.at("seed").get<uint64_t>();
      c.max_len = header.at("max_len").get<size_t>();
      c.mask_prob = header.at("mask_prob").get<double>();
      const auto& counters = header.at("counters");
      c.epoch = counters.at("epoch").get<uint64_t>();
      c.batch_in_epoch = counters.at("batch_in_epoch").get<uint64_t>();
      c.step = counters.at("step").get<uint64_t>();
      c.total_steps_planned =
          counters.at("total_steps_planned").get<uint64_t>();
      const auto& best = header.at("best");
      c.best_val_accuracy = best.at("val_accuracy").get<double>();
      c.best_val_macro_f1 = best.at("val_macro_f1").get<double>();
      c.best_epoch = best.at("epoch").get<int64_t>();
      const auto rs = header.at("rng_state").get<std::vector<uint64_t>>();
      if (rs.size() != 4) throw FormatError("rng_state must have 4 words");
      std::copy(rs.begin(), rs.end(), c.rng_state.begin());
      const auto& adam = header.at("adam");
      c.adam_cfg.lr = adam.at("lr").get<double>();
      c.adam_cfg.beta1 = adam.at("beta1").get<double>();
      c.adam_cfg.beta2 = adam.at("beta2").get<double>();
      c.adam_cfg.eps = adam.at("eps").get<double>();
      c.adam_step = adam.at("step").get<uint64_t>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("checkpoint header: ") + e.what());
    }

    // Expected weight tensors by name, shapes implied by the config.
    std::map<std::string, Tensor32*> expected;
    c.weights.p.for_each([&](const std::string& name, Tensor32& t) {
      expected.emplace(name, &t);
    });
    std::map<std::string, bool> seen;
    const auto count = ckpt_detail::read_pod<uint64_t>(in, "tensor count");
    for (uint64_t i = 0; i < count; ++i) {
      auto [name, tensor] = ckpt_detail::read_tensor(in);
      if (name.rfind("adam.m.", 0) == 0) {
        c.adam_moments[name.substr(7)].first = std::move(tensor);
        continue;
      }
      if (name.rfind("adam.v.", 0) == 0) {
        c.adam_moments[name.substr(7)].second = std::move(tensor);
        continue;
      }
      auto it = expected.find(name);
      if (it == expected.end()) {
        throw FormatError("checkpoint contains unexpected tensor '" + name +
                          "'");
      }
      if (it->second->shape() != tensor.shape()) {
        throw FormatError("tensor '" + name +
                          "' shape mismatch against the embedded model "
                          "config");
      }
      *it->second = std::move(tensor);
      seen[name] = true;
    }
    for (const auto& [name, ptr] : expected) {
      if (!seen.count(name)) {
        throw FormatError("checkpoint is missing tensor '" + name + "'");
      }
    }
    for (const auto& [name, mv] : c.adam_moments) {
      if (mv.first.empty() || mv.second.empty()) {
        throw FormatError("checkpoint has incomplete optimizer moments for '" +
                          name + "'");
      }
    }
    return c;
  }
};

}  // namespace phonelm
