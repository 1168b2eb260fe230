#include "aurec/tape.hpp"

namespace aurec {

namespace {
thread_local Tape* g_active = nullptr;
}

Tape::Tape() : prev_(g_active) { g_active = this; }

Tape::~Tape() { g_active = prev_; }

Tape* Tape::active() { return g_active; }

void Tape::record(std::shared_ptr<TensorImpl> output, std::function<void()> backward) {
    records_.push_back({std::move(output), std::move(backward)});
}

void Tape::backward(const Tensor& output) {
    if (!output.defined()) throw UsageError("backward() on an undefined tensor");
    if (output.numel() != 1)
        throw UsageError("backward() requires a scalar output, got shape " + shape_str(output.shape()));

    for (auto& rec : records_)
        if (rec.output->grad_allocated()) rec.output->zero_grad();

    output.impl()->ensure_grad();
    if (output.dtype() == DType::f32) output.impl()->grad32[0] = 1.0f;
    else output.impl()->grad64[0] = 1.0;

    for (auto it = records_.rbegin(); it != records_.rend(); ++it) it->backward();
}

NoGrad::NoGrad() : saved_(g_active) { g_active = nullptr; }

NoGrad::~NoGrad() { g_active = saved_; }

} // namespace aurec
