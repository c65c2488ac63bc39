#pragma once

#include <cstdint>
#include <vector>

namespace micl::ad {

// Wengert list for reverse-mode differentiation. Each node records up to two
// parents and the local partial derivatives with respect to them. Parent
// index -1 marks a constant operand (skipped in the sweep). A node's parents
// always precede it, so one backward pass over [0, root] accumulates exact
// adjoints.
template <class T>
class Tape {
 public:
  using Index = std::int32_t;

  Index leaf() {
    nodes_.push_back(Node{-1, -1, T(0), T(0)});
    return last_index();
  }

  Index unary(Index parent, T partial) {
    nodes_.push_back(Node{parent, -1, partial, T(0)});
    return last_index();
  }

  Index binary(Index p0, Index p1, T d0, T d1) {
    nodes_.push_back(Node{p0, p1, d0, d1});
    return last_index();
  }

  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Adjoint of every node with respect to nodes_[root].
  std::vector<T> adjoints(Index root) const {
    std::vector<T> adj(nodes_.size(), T(0));
    adj[static_cast<std::size_t>(root)] = T(1);
    for (Index i = root; i >= 0; --i) {
      const Node& n = nodes_[static_cast<std::size_t>(i)];
      const T a = adj[static_cast<std::size_t>(i)];
      if (n.parent0 >= 0) adj[static_cast<std::size_t>(n.parent0)] += n.d0 * a;
      if (n.parent1 >= 0) adj[static_cast<std::size_t>(n.parent1)] += n.d1 * a;
    }
    return adj;
  }

 private:
  struct Node {
    Index parent0;
    Index parent1;
    T d0;
    T d1;
  };

  Index last_index() const { return static_cast<Index>(nodes_.size()) - 1; }

  std::vector<Node> nodes_;
};

}  // namespace micl::ad
