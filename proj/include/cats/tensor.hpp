#pragma once

#include <cstring>
#include <initializer_list>
#include <memory>
#include <unordered_set>
#include <utility>

#include "cats/common.hpp"

namespace cats {

namespace detail {
struct TensorImpl {
    Shape shape;
    std::vector<real> value;
    std::vector<real> grad;  // empty until a backward pass needs it
    bool requires_grad = false;
    bool tape_output = false;  // produced by a recorded op (non-leaf)
};
}  // namespace detail

// Dense row-major tensor. Cheap to copy: copies share storage. Values are
// treated as immutable once an op has consumed them; in-place mutation is
// reserved for leaf parameters between training steps.
class Tensor {
  public:
    Tensor() = default;

    explicit Tensor(Shape shape, real fill = real(0), bool requires_grad = false)
        : impl_(std::make_shared<detail::TensorImpl>()) {
        impl_->shape = std::move(shape);
        impl_->value.assign(shape_numel(impl_->shape), fill);
        impl_->requires_grad = requires_grad;
    }

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return Tensor(std::move(shape), real(0), requires_grad);
    }

    static Tensor full(Shape shape, real fill, bool requires_grad = false) {
        return Tensor(std::move(shape), fill, requires_grad);
    }

    static Tensor from(Shape shape, std::vector<real> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw DimError("tensor init: shape " + shape_str(shape) + " needs " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(values.size()));
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorImpl>();
        t.impl_->shape = std::move(shape);
        t.impl_->value = std::move(values);
        t.impl_->requires_grad = requires_grad;
        return t;
    }

    static Tensor scalar(real v, bool requires_grad = false) {
        return from({}, {v}, requires_grad);
    }

    static Tensor randn(Shape shape, Rng& rng, real stddev = real(1),
                        bool requires_grad = false) {
        Tensor t(std::move(shape), real(0), requires_grad);
        for (auto& v : t.impl_->value) v = static_cast<real>(rng.normal() * stddev);
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->value.size(); }
    std::size_t dim(std::size_t i) const { return impl_->shape[i]; }

    real* data() { return impl_->value.data(); }
    const real* data() const { return impl_->value.data(); }
    const std::vector<real>& values() const { return impl_->value; }

    real item() const {
        if (numel() != 1) throw UsageError("item(): tensor " + shape_str(shape()) + " is not scalar");
        return impl_->value[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    void set_requires_grad(bool v) { impl_->requires_grad = v; }

    bool is_tape_output() const { return impl_->tape_output; }
    void mark_tape_output() { impl_->tape_output = true; }

    void ensure_grad() {
        if (impl_->grad.size() != impl_->value.size()) impl_->grad.assign(impl_->value.size(), real(0));
    }
    bool has_grad() const { return !impl_->grad.empty(); }
    real* grad() {
        ensure_grad();
        return impl_->grad.data();
    }
    const std::vector<real>& grad_values() const { return impl_->grad; }
    void zero_grad() {
        if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), real(0));
    }

    Tensor clone() const {
        Tensor t;
        t.impl_ = std::make_shared<detail::TensorImpl>();
        t.impl_->shape = impl_->shape;
        t.impl_->value = impl_->value;
        t.impl_->requires_grad = impl_->requires_grad;
        return t;
    }

    // Identity of the underlying storage; used for parameter registries and
    // the shared-parameter assertions.
    const void* id() const { return impl_.get(); }

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  private:
    std::shared_ptr<detail::TensorImpl> impl_;
    friend class Tape;
};

inline void check_all_finite(const Tensor& t, const char* op) {
    for (const real v : t.values())
        if (!std::isfinite(v))
            throw NumericError(std::string(op) + ": produced non-finite value");
}

// Reverse-mode tape. Constructing a Tape makes it the active recorder for the
// current thread (RAII); ops record backward closures while one is active.
// A tape is confined to the thread that created it.
class Tape {
  public:
    Tape() {
        prev_ = current_slot();
        current_slot() = this;
    }
    ~Tape() { current_slot() = prev_; }
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() { return current_slot(); }
    static bool recording() { return current_slot() != nullptr; }

    static Tape* exchange(Tape* t) {
        Tape* old = current_slot();
        current_slot() = t;
        return old;
    }

    void record(std::function<void()> backward_fn,
                const std::vector<Tensor>& inputs,
                const std::vector<Tensor>& outputs) {
        for (const Tensor& t : outputs) {
            Tensor mut = t;
            mut.mark_tape_output();
            track(t);
        }
        for (const Tensor& t : inputs) track(t);
        backs_.push_back(std::move(backward_fn));
    }

    std::size_t size() const { return backs_.size(); }

    // Accumulates d(loss)/d(leaf) into every reachable leaf grad. Repeated
    // calls add another full pass; intermediate (op-output) grads are reset
    // per call so the replay stays linear.
    void backward(Tensor loss) {
        if (loss.numel() != 1) throw UsageError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        if (!loss.requires_grad())
            throw UsageError("backward: loss does not depend on any tracked tensor");
        for (Tensor& t : tracked_)
            if (t.is_tape_output()) t.zero_grad();
        loss.grad()[0] += real(1);
        for (auto it = backs_.rbegin(); it != backs_.rend(); ++it) (*it)();
        for (const Tensor& t : tracked_)
            for (const real g : t.grad_values())
                if (!std::isfinite(g)) throw NumericError("backward: produced non-finite gradient");
    }

  private:
    static Tape*& current_slot() {
        thread_local Tape* cur = nullptr;
        return cur;
    }

    void track(const Tensor& t) {
        if (seen_.insert(t.id()).second) tracked_.push_back(t);
    }

    std::vector<std::function<void()>> backs_;
    std::vector<Tensor> tracked_;
    std::unordered_set<const void*> seen_;
    Tape* prev_ = nullptr;
};

inline void backward(const Tensor& loss) {
    Tape* t = Tape::current();
    if (!t) throw UsageError("backward: no active tape on this thread");
    t->backward(loss);
}

// Temporarily disables recording on this thread (finite-difference probes,
// evaluation passes inside a training loop).
class TapeSuspend {
  public:
    TapeSuspend() : saved_(Tape::exchange(nullptr)) {}
    ~TapeSuspend() { Tape::exchange(saved_); }
    TapeSuspend(const TapeSuspend&) = delete;
    TapeSuspend& operator=(const TapeSuspend&) = delete;

  private:
    Tape* saved_;
};

}  // namespace cats
