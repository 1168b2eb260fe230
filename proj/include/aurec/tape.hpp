#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "aurec/tensor.hpp"

namespace aurec {

// Execution-ordered record of differentiable operations. Constructing a Tape
// makes it the active tape for the current thread (RAII, nestable); ops record
// themselves onto the active tape when any input participates in grads.
// A tape is confined to one thread; independent tapes on different threads do
// not interact.
class Tape {
public:
    struct Record {
        std::shared_ptr<TensorImpl> output;
        std::function<void()> backward;
    };

    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* active();

    void record(std::shared_ptr<TensorImpl> output, std::function<void()> backward);
    size_t size() const { return records_.size(); }

    // Seeds d(output)/d(output) = 1 and replays adjoints in reverse order.
    // Leaf gradients accumulate across calls; intermediate gradients are
    // re-zeroed on every call, so repeated backward passes are reproducible.
    void backward(const Tensor& output);

private:
    std::vector<Record> records_;
    Tape* prev_ = nullptr;
};

// Suppresses recording within a scope (forward-only evaluation).
class NoGrad {
public:
    NoGrad();
    ~NoGrad();
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

private:
    Tape* saved_;
};

} // namespace aurec
