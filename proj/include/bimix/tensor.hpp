#pragma once

// Dense row-major tensor with reverse-mode autodiff. The graph is rebuilt on
// every forward pass (dynamic tape): each op node remembers its parents and a
// backward closure, and nodes carry a monotonically increasing sequence number
// so creation order doubles as a topological order.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <unordered_set>
#include <vector>

namespace bimix {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

inline std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ',';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {
inline thread_local bool grad_mode = true;
inline std::atomic<std::uint64_t> node_seq{1};
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode; }

// RAII guard disabling tape recording (evaluation / generation paths).
struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode) { detail::grad_mode = false; }
    ~NoGradGuard() { detail::grad_mode = prev; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

template <typename S>
struct Node {
    static_assert(std::is_floating_point_v<S>, "tensor scalar must be float or double");

    Shape shape;
    std::vector<S> data;
    std::vector<S> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::uint64_t seq = 0;
    std::vector<std::shared_ptr<Node<S>>> parents;
    std::function<void(Node<S>&)> backward;  // pulls grad of this node into parents

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), S(0));
    }
};

template <typename S>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), S(0), requires_grad);
    }

    static Tensor full(Shape shape, S value, bool requires_grad = false) {
        auto node = std::make_shared<Node<S>>();
        node->data.assign(shape_numel(shape), value);
        node->shape = std::move(shape);
        node->requires_grad = requires_grad;
        node->seq = detail::node_seq.fetch_add(1, std::memory_order_relaxed);
        return Tensor(std::move(node));
    }

    static Tensor from_data(Shape shape, std::vector<S> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size()) {
            throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match buffer of " +
                                        std::to_string(data.size()) + " elements");
        }
        auto node = std::make_shared<Node<S>>();
        node->shape = std::move(shape);
        node->data = std::move(data);
        node->requires_grad = requires_grad;
        node->seq = detail::node_seq.fetch_add(1, std::memory_order_relaxed);
        return Tensor(std::move(node));
    }

    static Tensor scalar(S value, bool requires_grad = false) {
        return from_data({1}, {value}, requires_grad);
    }

    // For op implementations: wrap a freshly built node.
    static Tensor wrap(std::shared_ptr<Node<S>> node) { return Tensor(std::move(node)); }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->data.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }

    std::vector<S>& data() { return node_->data; }
    const std::vector<S>& data() const { return node_->data; }

    S& at(std::size_t i, std::size_t j) { return node_->data[i * node_->shape[1] + j]; }
    S at(std::size_t i, std::size_t j) const { return node_->data[i * node_->shape[1] + j]; }

    S item() const {
        if (numel() != 1) throw std::runtime_error("item(): tensor has " + std::to_string(numel()) + " elements");
        return node_->data[0];
    }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    bool has_grad() const { return !node_->grad.empty(); }
    std::vector<S>& grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    const std::vector<S>& grad() const {
        node_->ensure_grad();
        return node_->grad;
    }

    void zero_grad() {
        if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
    }

    bool is_leaf() const { return !node_->backward; }

    // Reverse sweep from a scalar. Leaf grads accumulate additively across
    // calls; interior node grads are reset per sweep.
    void backward() const {
        if (numel() != 1) {
            throw std::runtime_error("backward(): loss must be scalar, got shape " + shape_str(node_->shape));
        }
        if (!node_->requires_grad) {
            throw std::runtime_error("backward(): tensor does not require grad");
        }

        std::vector<Node<S>*> reachable;
        std::unordered_set<Node<S>*> seen;
        std::vector<Node<S>*> stack{node_.get()};
        seen.insert(node_.get());
        while (!stack.empty()) {
            Node<S>* n = stack.back();
            stack.pop_back();
            reachable.push_back(n);
            for (auto& p : n->parents) {
                if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
            }
        }
        std::sort(reachable.begin(), reachable.end(),
                  [](const Node<S>* a, const Node<S>* b) { return a->seq > b->seq; });

        for (Node<S>* n : reachable) {
            if (n->backward) {
                n->grad.assign(n->data.size(), S(0));
            }
        }
        if (node_->backward) {
            node_->grad[0] = S(1);
        } else {
            node_->ensure_grad();
            node_->grad[0] += S(1);
        }
        for (Node<S>* n : reachable) {
            if (n->backward) n->backward(*n);
        }
    }

    std::shared_ptr<Node<S>>& node() { return node_; }
    const std::shared_ptr<Node<S>>& node() const { return node_; }

private:
    explicit Tensor(std::shared_ptr<Node<S>> node) : node_(std::move(node)) {}
    std::shared_ptr<Node<S>> node_;
};

template <typename S>
void fill_uniform(Tensor<S>& t, std::mt19937& rng, S lo, S hi) {
    std::uniform_real_distribution<S> dist(lo, hi);
    for (S& v : t.data()) v = dist(rng);
}

template <typename S>
void fill_normal(Tensor<S>& t, std::mt19937& rng, S mean, S stddev) {
    std::normal_distribution<S> dist(mean, stddev);
    for (S& v : t.data()) v = dist(rng);
}

template <typename S>
bool all_finite(const Tensor<S>& t) {
    for (S v : t.data())
        if (!std::isfinite(v)) return false;
    return true;
}

}  // namespace bimix
