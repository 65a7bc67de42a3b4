#pragma once

#include <Eigen/Dense>
#include <cmath>

namespace dhn {

/// Forward-mode scalar carrying a dense gradient with respect to up to
/// kMaxDualDim independent variables. Dimension is fixed per computation.
inline constexpr int kMaxDualDim = 96;

class Dual {
  public:
    using Grad = Eigen::Matrix<double, Eigen::Dynamic, 1, 0, kMaxDualDim, 1>;

    Dual() : v_(0.0) {}
    // Implicit from double: gradient stays empty (treated as zero).
    Dual(double v) : v_(v) {}  // NOLINT

    static Dual variable(double v, int index, int dim) {
        Dual d(v);
        d.g_ = Grad::Zero(dim);
        d.g_(index) = 1.0;
        return d;
    }
    static Dual constant(double v) { return Dual(v); }

    double value() const { return v_; }
    const Grad& grad() const { return g_; }
    Grad& grad() { return g_; }

    Dual& operator+=(const Dual& o) {
        v_ += o.v_;
        addGrad(o.g_, 1.0);
        return *this;
    }
    Dual& operator-=(const Dual& o) {
        v_ -= o.v_;
        addGrad(o.g_, -1.0);
        return *this;
    }
    Dual& operator*=(const Dual& o) {
        // d(xy) = y dx + x dy
        if (g_.size() > 0) g_ *= o.v_;
        addGrad(o.g_, v_);
        v_ *= o.v_;
        return *this;
    }
    Dual& operator/=(const Dual& o) {
        const double inv = 1.0 / o.v_;
        v_ *= inv;
        if (g_.size() > 0) g_ *= inv;
        addGrad(o.g_, -v_ * inv);
        return *this;
    }

    friend Dual operator+(Dual a, const Dual& b) { return a += b; }
    friend Dual operator-(Dual a, const Dual& b) { return a -= b; }
    friend Dual operator*(Dual a, const Dual& b) { return a *= b; }
    friend Dual operator/(Dual a, const Dual& b) { return a /= b; }
    friend Dual operator-(Dual a) {
        a.v_ = -a.v_;
        if (a.g_.size() > 0) a.g_ = -a.g_;
        return a;
    }

    friend bool operator<(const Dual& a, const Dual& b) { return a.v_ < b.v_; }
    friend bool operator>(const Dual& a, const Dual& b) { return a.v_ > b.v_; }
    friend bool operator<=(const Dual& a, const Dual& b) { return a.v_ <= b.v_; }
    friend bool operator>=(const Dual& a, const Dual& b) { return a.v_ >= b.v_; }

    friend Dual sqrt(const Dual& a) {
        Dual r;
        r.v_ = std::sqrt(a.v_);
        if (a.g_.size() > 0) r.g_ = a.g_ * (0.5 / r.v_);
        return r;
    }
    friend Dual abs(const Dual& a) { return a.v_ < 0.0 ? -a : a; }

  private:
    void addGrad(const Grad& og, double scale) {
        if (og.size() == 0) return;
        if (g_.size() == 0)
            g_ = og * scale;
        else
            g_ += og * scale;
    }

    double v_;
    Grad g_;
};

inline double value(double x) { return x; }
inline double value(const Dual& x) { return x.value(); }

}  // namespace dhn
