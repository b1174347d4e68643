#include "dbp/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_map>
#include <unordered_set>
#include <utility>

#include "dbp/error.hpp"

namespace dbp {

namespace {

thread_local bool t_grad_enabled = true;
thread_local int t_segment_depth = 0;

std::atomic<long> g_live_nodes{0};
std::atomic<long> g_peak_nodes{0};

using detail::TensorImpl;

void accumulate(Buffer& dst, const Buffer& src) {
  if (dst.empty()) {
    dst = src;
    return;
  }
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

// Destination of leaf gradients for one propagation. Nested sinks arise
// when a checkpoint segment is replayed during an outer propagation.
class GradSink {
 public:
  GradSink(bool all_leaves, GradSink* parent) : all_leaves_(all_leaves), parent_(parent) {}

  void want(const TensorImpl* impl) { wanted_.insert(impl); }

  bool wants(const TensorImpl* impl) const {
    if (wanted_.count(impl)) return true;
    if (parent_ && parent_->wants_specific(impl)) return true;
    return all_leaves_ && impl->requires_grad && !impl->node;
  }

  void deliver(TensorImpl* impl, const Buffer& g) {
    if (wanted_.count(impl)) {
      accumulate(captured_[impl], g);
    } else if (parent_ && parent_->wants_specific(impl)) {
      parent_->deliver(impl, g);
    } else if (all_leaves_ && impl->requires_grad && !impl->node) {
      if (!impl->grad) impl->grad = Buffer(impl->data.size(), 0.0);
      for (std::size_t i = 0; i < g.size(); ++i) (*impl->grad)[i] += g[i];
    }
  }

  bool all_leaves() const { return all_leaves_; }

  Buffer take(const TensorImpl* impl, std::size_t size) {
    auto it = captured_.find(impl);
    if (it == captured_.end() || it->second.empty()) return Buffer(size, 0.0);
    return std::move(it->second);
  }

 private:
  bool wants_specific(const TensorImpl* impl) const {
    if (wanted_.count(impl)) return true;
    return parent_ && parent_->wants_specific(impl);
  }

  bool all_leaves_;
  GradSink* parent_;
  std::unordered_set<const TensorImpl*> wanted_;
  std::unordered_map<const TensorImpl*, Buffer> captured_;
};

thread_local GradSink* t_sink = nullptr;

class SinkScope {
 public:
  explicit SinkScope(GradSink* sink) : previous_(t_sink) { t_sink = sink; }
  ~SinkScope() { t_sink = previous_; }

 private:
  GradSink* previous_;
};

class GradModeScope {
 public:
  explicit GradModeScope(bool enabled) : previous_(t_grad_enabled) {
    t_grad_enabled = enabled;
  }
  ~GradModeScope() { t_grad_enabled = previous_; }

 private:
  bool previous_;
};

class SegmentScope {
 public:
  SegmentScope() { ++t_segment_depth; }
  ~SegmentScope() { --t_segment_depth; }
};

void check_finite(const Buffer& g, const char* where) {
  for (double v : g) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite gradient in backward of ") + where);
    }
  }
}

// Reverse-mode sweep from `root` seeded with `seed`.
void propagate(TensorImpl* root, Buffer seed, GradSink& sink) {
  // Post-order over the graph: every tensor appears after all its inputs.
  std::vector<TensorImpl*> order;
  std::unordered_set<const TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    const auto& node = impl->node;
    if (node && next < node->inputs.size()) {
      TensorImpl* child = node->inputs[next++].impl();
      if (visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(impl);
    stack.pop_back();
  }

  std::unordered_map<const TensorImpl*, char> needs;
  needs.reserve(order.size());
  for (TensorImpl* impl : order) {
    bool need = sink.wants(impl);
    if (!need && impl->node) {
      if (impl->node->checkpoint) {
        need = true;
      } else {
        for (const auto& in : impl->node->inputs) {
          if (needs[in.impl()]) {
            need = true;
            break;
          }
        }
      }
    }
    needs[impl] = need ? 1 : 0;
  }

  std::unordered_map<const TensorImpl*, Buffer> grads;
  grads[root] = std::move(seed);
  SinkScope scope(&sink);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* impl = *it;
    auto found = grads.find(impl);
    if (found == grads.end()) continue;
    Buffer g = std::move(found->second);
    grads.erase(found);
    if (!needs[impl]) continue;
    if (sink.wants(impl)) sink.deliver(impl, g);
    const auto& node = impl->node;
    if (!node) continue;

    const std::size_t n_in = node->inputs.size();
    std::vector<char> mask(n_in, 0);
    bool any = false;
    for (std::size_t i = 0; i < n_in; ++i) {
      mask[i] = needs[node->inputs[i].impl()];
      any = any || mask[i];
    }
    // A replayed segment may still feed parameters captured by its closure.
    if (!any && !(node->checkpoint && sink.all_leaves())) continue;
    std::vector<Buffer> gin(n_in);
    node->backward(g, gin, mask);
    for (std::size_t i = 0; i < n_in; ++i) {
      if (!mask[i] || gin[i].empty()) continue;
      check_finite(gin[i], node->name);
      accumulate(grads[node->inputs[i].impl()], gin[i]);
    }
  }
}

}  // namespace

namespace detail {

Node::Node(const char* name_, std::vector<Tensor> inputs_, BackwardFn backward_,
           bool checkpoint_)
    : name(name_), inputs(std::move(inputs_)), backward(std::move(backward_)),
      checkpoint(checkpoint_) {
  if (!checkpoint) {
    const long now = ++g_live_nodes;
    long peak = g_peak_nodes.load();
    while (now > peak && !g_peak_nodes.compare_exchange_weak(peak, now)) {
    }
  }
}

Node::~Node() {
  if (!checkpoint) --g_live_nodes;
}

}  // namespace detail

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool inside_checkpoint_segment() { return t_segment_depth > 0; }

void backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  GradSink sink(true, nullptr);
  propagate(loss.impl(), Buffer{1.0}, sink);
}

std::vector<Tensor> vjp(const Tensor& output, const Tensor& grad_output,
                        std::span<const Tensor> wrt) {
  if (grad_output.numel() != output.numel()) {
    throw ShapeError("vjp seed shape " + shape_str(grad_output.shape()) +
                     " does not match output " + shape_str(output.shape()));
  }
  GradSink sink(false, nullptr);
  for (const auto& w : wrt) sink.want(w.impl());
  propagate(output.impl(), Buffer(grad_output.data().begin(), grad_output.data().end()),
            sink);
  std::vector<Tensor> out;
  out.reserve(wrt.size());
  for (const auto& w : wrt) {
    out.emplace_back(w.shape(), sink.take(w.impl(), w.numel()), Dtype::F64);
  }
  return out;
}

std::vector<Tensor> grad(const Tensor& loss, std::span<const Tensor> wrt) {
  if (loss.numel() != 1) {
    throw ShapeError("grad() needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  return vjp(loss, Tensor::scalar(1.0), wrt);
}

Tensor checkpoint_segment(const SegmentFn& fn, std::vector<Tensor> inputs) {
  if (!t_grad_enabled) {
    SegmentScope seg;
    return fn(inputs);
  }
  Tensor first;
  {
    GradModeScope off(false);
    SegmentScope seg;
    first = fn(inputs);
  }
  auto recorded = std::make_shared<const Buffer>(first.data().begin(), first.data().end());
  std::vector<Tensor> saved = inputs;
  auto rule = [fn, saved, recorded](const Buffer& gout, std::span<Buffer> gin,
                                    std::span<const char> need) {
    GradSink* outer = t_sink;
    GradSink inner(outer ? outer->all_leaves() : false, outer);
    std::vector<Tensor> replay;
    replay.reserve(saved.size());
    for (std::size_t i = 0; i < saved.size(); ++i) {
      Tensor d = saved[i].detach();
      if (need[i]) {
        d.set_requires_grad(true);
        inner.want(d.impl());
      }
      replay.push_back(std::move(d));
    }
    Tensor again;
    {
      GradModeScope on(true);
      SegmentScope seg;
      again = fn(replay);
    }
    if (!bitwise_equal(again.data(), *recorded)) {
      throw DeterminismError(
          "checkpointed segment did not replay identically; its randomness is not "
          "reproducible from its inputs");
    }
    if (again.node()) propagate(again.impl(), gout, inner);
    for (std::size_t i = 0; i < saved.size(); ++i) {
      if (need[i]) gin[i] = inner.take(replay[i].impl(), replay[i].numel());
    }
  };
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = first.shape();
  impl->data = *recorded;
  impl->dtype = first.dtype();
  impl->requires_grad = true;
  impl->node = std::make_shared<detail::Node>("checkpoint", std::move(inputs), std::move(rule),
                                              true);
  return Tensor::from_impl(std::move(impl));
}

long GraphCounters::live() { return g_live_nodes.load(); }
long GraphCounters::peak() { return g_peak_nodes.load(); }
void GraphCounters::reset_peak() { g_peak_nodes.store(g_live_nodes.load()); }

}  // namespace dbp
