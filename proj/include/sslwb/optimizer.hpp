#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>

#include "sslwb/nn.hpp"

namespace sslwb {

/// Linear warmup followed by cosine decay to min_frac * base (or constant
/// after warmup when cosine is disabled).
struct LrSchedule {
  double base_lr = 1e-3;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;
  double min_frac = 0.0;
  bool cosine = true;

  double at(std::size_t step) const {
    if (warmup_steps > 0 && step < warmup_steps)
      return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
    if (!cosine || total_steps <= warmup_steps) return base_lr;
    double t = static_cast<double>(step - warmup_steps) /
               static_cast<double>(total_steps - warmup_steps);
    t = std::min(1.0, std::max(0.0, t));
    double floor_lr = base_lr * min_frac;
    return floor_lr + (base_lr - floor_lr) * 0.5 * (1.0 + std::cos(M_PI * t));
  }
};

/// Adam with decoupled weight decay. Moment state is keyed by parameter name
/// so it survives checkpointing and selective re-initialization.
template <class T>
class AdamW {
 public:
  struct Hyper {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  explicit AdamW(Hyper hp = {}) : hp_(hp) {}

  const Hyper& hyper() const { return hp_; }
  std::uint64_t step_count() const { return step_; }

  /// One update over all parameters the filter admits (nullptr = all).
  template <class Net>
  void step(Net& net, double lr,
            const std::function<bool(const std::string&)>& filter = nullptr) {
    ++step_;
    const T b1 = static_cast<T>(hp_.beta1), b2 = static_cast<T>(hp_.beta2);
    const T corr1 = T(1) - static_cast<T>(std::pow(hp_.beta1, static_cast<double>(step_)));
    const T corr2 = T(1) - static_cast<T>(std::pow(hp_.beta2, static_cast<double>(step_)));
    const T eps = static_cast<T>(hp_.eps);
    const T lrT = static_cast<T>(lr);
    const T wd = static_cast<T>(hp_.weight_decay);
    net.for_each_param([&](Param<T>& p) {
      if (filter && !filter(p.name)) return;
      State& st = state_[p.name];
      if (st.m.numel() != p.value.numel()) {
        st.m = Tensor<T>(p.value.shape);
        st.v = Tensor<T>(p.value.shape);
      }
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        T g = p.grad[i];
        st.m[i] = b1 * st.m[i] + (T(1) - b1) * g;
        st.v[i] = b2 * st.v[i] + (T(1) - b2) * g * g;
        T mhat = st.m[i] / corr1;
        T vhat = st.v[i] / corr2;
        p.value[i] -= lrT * (mhat / (std::sqrt(vhat) + eps) + wd * p.value[i]);
      }
    });
  }

  /// Drops moment state for parameters matching the predicate (used when a
  /// head is re-initialized mid-training).
  void reset_state(const std::function<bool(const std::string&)>& pred) {
    for (auto it = state_.begin(); it != state_.end();) {
      if (pred(it->first))
        it = state_.erase(it);
      else
        ++it;
    }
  }

  /// Serialization hooks: moments exported as "<name>.adam_m" / "<name>.adam_v".
  std::vector<std::pair<std::string, Tensor<T>>> export_state() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (const auto& [name, st] : state_) {
      out.emplace_back(name + ".adam_m", st.m);
      out.emplace_back(name + ".adam_v", st.v);
    }
    return out;
  }
  void import_state(const std::vector<std::pair<std::string, Tensor<T>>>& arrays,
                    std::uint64_t step) {
    state_.clear();
    step_ = step;
    for (const auto& [name, t] : arrays) {
      auto strip = [&name](const char* suffix) {
        return name.substr(0, name.size() - std::string(suffix).size());
      };
      if (name.size() > 7 && name.rfind(".adam_m") == name.size() - 7)
        state_[strip(".adam_m")].m = t;
      else if (name.size() > 7 && name.rfind(".adam_v") == name.size() - 7)
        state_[strip(".adam_v")].v = t;
    }
  }

 private:
  struct State {
    Tensor<T> m, v;
  };
  Hyper hp_;
  std::map<std::string, State> state_;
  std::uint64_t step_ = 0;
};

}  // namespace sslwb
