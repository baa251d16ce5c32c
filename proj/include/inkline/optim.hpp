#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "inkline/autodiff.hpp"
#include "inkline/common.hpp"
#include "inkline/tensor.hpp"

namespace inkline::ad {

/// Owns persistent parameter and buffer nodes plus their optimizer state.
/// Creation order is the canonical (checkpoint, gradient-sink) order.
template <typename S>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    std::unique_ptr<Node<S>> node;
    bool trainable = false;
    Tensor<S> m;  // first moment
    Tensor<S> v;  // second moment
  };

  Node<S>* create(const std::string& name, Tensor<S> init) {
    return emplace(name, std::move(init), true);
  }

  Node<S>* create_buffer(const std::string& name, Tensor<S> init) {
    return emplace(name, std::move(init), false);
  }

  std::size_t size() const { return entries_.size(); }
  Entry& entry(std::size_t i) { return *entries_[i]; }
  const Entry& entry(std::size_t i) const { return *entries_[i]; }

  Node<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : entries_[it->second]->node.get();
  }

  void zero_grad() {
    for (auto& e : entries_) e->node->grad = Tensor<S>();
  }

  /// Number of trainable scalars, optionally skipping names with a prefix.
  std::int64_t trainable_count(const std::string& skip_prefix = "") const {
    std::int64_t n = 0;
    for (const auto& e : entries_) {
      if (!e->trainable) continue;
      if (!skip_prefix.empty() && e->name.rfind(skip_prefix, 0) == 0) continue;
      n += e->node->val.numel();
    }
    return n;
  }

  /// Merge per-thread gradient sinks (in slot order) into parameter grads.
  void merge_sinks(std::vector<std::vector<Tensor<S>>>& sinks) {
    for (auto& sink : sinks) {
      for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (sink[i].v.empty()) continue;
        Node<S>* n = entries_[i]->node.get();
        if (n->grad.v.empty()) n->grad = Tensor<S>::zeros(n->val.shape);
        for (std::size_t k = 0; k < sink[i].v.size(); ++k) n->grad.v[k] += sink[i].v[k];
      }
    }
  }

  std::vector<Tensor<S>> make_sink() const {
    return std::vector<Tensor<S>>(entries_.size());
  }

 private:
  Node<S>* emplace(const std::string& name, Tensor<S> init, bool trainable) {
    if (index_.count(name)) throw std::runtime_error("duplicate parameter name: " + name);
    auto e = std::make_unique<Entry>();
    e->name = name;
    e->trainable = trainable;
    e->node = std::make_unique<Node<S>>();
    e->node->val = std::move(init);
    e->node->requires_grad = trainable;
    e->node->param_index = static_cast<int>(entries_.size());
    index_[name] = entries_.size();
    entries_.push_back(std::move(e));
    return entries_.back()->node.get();
  }

  std::vector<std::unique_ptr<Entry>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Decoupled weight decay Adam. Decay multiplies weights directly; moments
/// are bias-corrected. A non-finite gradient aborts the step before any
/// parameter is touched.
template <typename S>
class AdamW {
 public:
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;

  void step(ParamStore<S>& store) {
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto& e = store.entry(i);
      if (!e.trainable || e.node->grad.v.empty()) continue;
      for (S g : e.node->grad.v)
        if (!std::isfinite(static_cast<double>(g)))
          throw std::runtime_error("non-finite gradient in parameter " + e.name);
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < store.size(); ++i) {
      auto& e = store.entry(i);
      if (!e.trainable || e.node->grad.v.empty()) continue;
      if (e.m.v.empty()) {
        e.m = Tensor<S>::zeros(e.node->val.shape);
        e.v = Tensor<S>::zeros(e.node->val.shape);
      }
      for (std::size_t k = 0; k < e.node->val.v.size(); ++k) {
        const double g = static_cast<double>(e.node->grad.v[k]);
        double m = beta1 * static_cast<double>(e.m.v[k]) + (1.0 - beta1) * g;
        double v = beta2 * static_cast<double>(e.v.v[k]) + (1.0 - beta2) * g * g;
        e.m.v[k] = static_cast<S>(m);
        e.v.v[k] = static_cast<S>(v);
        const double mhat = m / bc1;
        const double vhat = v / bc2;
        double w = static_cast<double>(e.node->val.v[k]);
        w -= lr * mhat / (std::sqrt(vhat) + eps);
        w -= lr * weight_decay * static_cast<double>(e.node->val.v[k]);
        e.node->val.v[k] = static_cast<S>(w);
      }
    }
  }

  long step_count() const { return t_; }

 private:
  long t_ = 0;
};

/// Fan-in scaled uniform initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
template <typename S>
Tensor<S> uniform_init(std::vector<int> shape, int fan_in, Rng& rng) {
  Tensor<S> t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.v) v = static_cast<S>(rng.uniform(-bound, bound));
  return t;
}

// ---------------------------------------------------------------------------
// "DWT1" checkpoint format: magic, u32 version, length-prefixed config text,
// u32 entry count, per entry (name, dtype, shape), then raw f32 blobs in
// manifest order. Round-trips bit-exactly for f32 stores.
// ---------------------------------------------------------------------------

struct CheckpointEntry {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

struct Checkpoint {
  std::string config_text;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return &e;
    return nullptr;
  }
};

template <typename S>
std::string checkpoint_to_bytes(const ParamStore<S>& store, const std::string& config_text) {
  ByteWriter w;
  w.bytes("DWT1", 4);
  w.u32(1);
  w.str(config_text);
  w.u32(static_cast<std::uint32_t>(store.size()));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& e = store.entry(i);
    w.str(e.name);
    w.u8(0);  // f32
    w.u8(static_cast<std::uint8_t>(e.node->val.shape.size()));
    for (int d : e.node->val.shape) w.u32(static_cast<std::uint32_t>(d));
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    const auto& e = store.entry(i);
    for (S v : e.node->val.v) w.f32(static_cast<float>(v));
  }
  return w.buf;
}

inline Checkpoint checkpoint_from_bytes(const std::string& bytes) {
  ByteReader r(bytes);
  r.need(4);
  if (bytes.compare(0, 4, "DWT1") != 0) throw std::runtime_error("bad checkpoint magic");
  r.pos = 4;
  const std::uint32_t version = r.u32();
  if (version != 1) throw std::runtime_error("unsupported checkpoint version");
  Checkpoint ck;
  ck.config_text = r.str();
  const std::uint32_t n = r.u32();
  ck.entries.resize(n);
  for (auto& e : ck.entries) {
    e.name = r.str();
    const std::uint8_t dtype = r.u8();
    if (dtype != 0) throw std::runtime_error("unsupported checkpoint dtype");
    const std::uint8_t rank = r.u8();
    e.shape.resize(rank);
    for (auto& d : e.shape) d = static_cast<int>(r.u32());
  }
  for (auto& e : ck.entries) {
    e.data.resize(static_cast<std::size_t>(ad::Tensor<float>::numel_of(e.shape)));
    for (auto& v : e.data) v = r.f32();
  }
  return ck;
}

template <typename S>
void load_checkpoint_into(const Checkpoint& ck, ParamStore<S>& store) {
  if (ck.entries.size() != store.size())
    throw std::runtime_error("checkpoint entry count mismatch");
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto& e = store.entry(i);
    const auto& src = ck.entries[i];
    if (src.name != e.name || src.shape != e.node->val.shape)
      throw std::runtime_error("checkpoint mismatch at " + e.name);
    for (std::size_t k = 0; k < src.data.size(); ++k)
      e.node->val.v[k] = static_cast<S>(src.data[k]);
  }
}

}  // namespace inkline::ad
