#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "ferformer/errors.hpp"
#include "ferformer/tensor.hpp"

namespace ferformer {

// Ordered record of executed operations. Ops append themselves in execution
// order, which is a topological order of the graph, so walking the record
// backwards visits nodes in strict reverse topological order. A tape is
// single-owner: one forward build, one backward, then reset.
template <typename T>
class Tape {
public:
    using BackwardFn = std::function<void()>;

    void record(std::shared_ptr<TensorImpl<T>> out, BackwardFn fn) {
        nodes_.push_back(Node{std::move(out), std::move(fn)});
    }

    // Seeds d loss / d loss = 1 and propagates through every recorded op.
    // Nodes not upstream of the loss never receive an output gradient and
    // their backward is skipped.
    void backward(const Tensor<T>& loss) {
        if (loss.numel() != 1) {
            throw UsageError("backward: loss must be scalar, got " + shape_str(loss.shape()));
        }
        if (nodes_.empty()) {
            throw UsageError("backward: tape is empty");
        }
        if (consumed_) {
            throw UsageError("backward: tape already consumed; reset it first");
        }
        consumed_ = true;
        ensure_grad(loss.impl());
        loss.impl()->grad[0] += T(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->out->grad.empty()) continue;
            it->fn();
        }
    }

    void reset() {
        nodes_.clear();
        consumed_ = false;
    }

    std::size_t size() const { return nodes_.size(); }
    bool consumed() const { return consumed_; }

private:
    struct Node {
        std::shared_ptr<TensorImpl<T>> out;
        BackwardFn fn;
    };
    std::vector<Node> nodes_;
    bool consumed_ = false;
};

template <typename T>
inline Tape<T>*& active_tape() {
    static Tape<T>* tape = nullptr;
    return tape;
}

// RAII scope that makes `tape` the recording target. No active tape means
// inference mode: ops run forward-only.
template <typename T>
class TapeScope {
public:
    explicit TapeScope(Tape<T>& tape) : prev_(active_tape<T>()) {
        active_tape<T>() = &tape;
    }
    ~TapeScope() { active_tape<T>() = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape<T>* prev_;
};

} // namespace ferformer
