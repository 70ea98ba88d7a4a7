#pragma once

#include <string>
#include <vector>

#include "skelmamba/util.hpp"

namespace skelmamba {

// Skeleton graph: joint count, undirected edges, parent array rooted at
// `center_joint` (root points to itself), and the all-pairs hop matrix.
struct SkeletonTopology {
  std::string name;
  int n_joints = 0;
  std::vector<std::pair<int, int>> edges;
  std::vector<int> parent;
  std::vector<std::vector<int>> hop;
  int center_joint = 0;  // joint used for sequence centering

  int max_hop() const;
};

// All-pairs shortest path lengths via BFS from every joint. Throws
// DataError naming the orphan joints when the graph is disconnected.
std::vector<std::vector<int>> hop_distance(
    const std::vector<std::pair<int, int>>& edges, int n_joints);

// Builds parent pointers by BFS from the given root.
std::vector<int> parent_array(const std::vector<std::pair<int, int>>& edges,
                              int n_joints, int root);

SkeletonTopology make_topology(std::string name, int n_joints,
                               std::vector<std::pair<int, int>> edges,
                               int center_joint);

// Plain-text format: first line n_joints, then one "i j" edge per line,
// zero-indexed.
SkeletonTopology load_topology(const std::string& path);
void save_topology(const SkeletonTopology& topo, const std::string& path);

// Built-ins: "ntu25" (25-joint), "ucla20" (20-joint), "synth11"
// (11-joint toy humanoid used by the synthetic dataset).
SkeletonTopology builtin_topology(const std::string& name);

}  // namespace skelmamba
