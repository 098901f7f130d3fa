#pragma once

#include <cmath>
#include <vector>

#include "spvit/autodiff.hpp"

namespace spvit {

// Decoupled weight decay Adam. One instance per parameter group; the step
// counter is per-group.
class AdamW {
  public:
    AdamW(double lr, double weight_decay = 0.0, double beta1 = 0.9, double beta2 = 0.999,
          double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::vector<Param*>& params) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (Param* p : params) {
            if (p->adam_m.numel() != p->value.numel()) {
                p->adam_m = Tensor::zeros(p->value.shape);
                p->adam_v = Tensor::zeros(p->value.shape);
            }
            for (std::size_t i = 0; i < p->value.numel(); ++i) {
                const double g = p->grad.data[i];
                double& m = p->adam_m.data[i];
                double& v = p->adam_v.data[i];
                m = beta1_ * m + (1.0 - beta1_) * g;
                v = beta2_ * v + (1.0 - beta2_) * g * g;
                const double mhat = m / bc1;
                const double vhat = v / bc2;
                p->value.data[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p->value.data[i]);
            }
        }
    }

    void zero_grad(const std::vector<Param*>& params) {
        for (Param* p : params) p->zero_grad();
    }

    double lr() const { return lr_; }
    std::uint64_t steps() const { return t_; }

  private:
    double lr_, wd_, beta1_, beta2_, eps_;
    std::uint64_t t_ = 0;
};

}  // namespace spvit
