#include "skelmamba/topology.hpp"

#include <algorithm>
#include <deque>
#include <fstream>
#include <sstream>

namespace skelmamba {

int SkeletonTopology::max_hop() const {
  int m = 0;
  for (const auto& row : hop) {
    for (int h : row) m = std::max(m, h);
  }
  return m;
}

std::vector<std::vector<int>> hop_distance(
    const std::vector<std::pair<int, int>>& edges, int n_joints) {
  if (n_joints <= 0) throw ConfigError("hop_distance: no joints");
  std::vector<std::vector<int>> adj(n_joints);
  for (auto [a, b] : edges) {
    if (a < 0 || b < 0 || a >= n_joints || b >= n_joints) {
      throw DataError("hop_distance: edge (" + std::to_string(a) + "," +
                      std::to_string(b) + ") out of range");
    }
    adj[a].push_back(b);
    adj[b].push_back(a);
  }
  std::vector<std::vector<int>> hop(n_joints, std::vector<int>(n_joints, -1));
  for (int src = 0; src < n_joints; ++src) {
    std::deque<int> q{src};
    hop[src][src] = 0;
    while (!q.empty()) {
      int u = q.front();
      q.pop_front();
      for (int v : adj[u]) {
        if (hop[src][v] < 0) {
          hop[src][v] = hop[src][u] + 1;
          q.push_back(v);
        }
      }
    }
  }
  // connectivity check from joint 0
  std::vector<int> orphans;
  for (int j = 0; j < n_joints; ++j) {
    if (hop[0][j] < 0) orphans.push_back(j);
  }
  if (!orphans.empty()) {
    std::string msg = "hop_distance: graph disconnected; orphan joints {";
    for (size_t i = 0; i < orphans.size(); ++i) {
      if (i) msg += ",";
      msg += std::to_string(orphans[i]);
    }
    msg += "}";
    throw DataError(msg);
  }
  return hop;
}

std::vector<int> parent_array(const std::vector<std::pair<int, int>>& edges,
                              int n_joints, int root) {
  std::vector<std::vector<int>> adj(n_joints);
  for (auto [a, b] : edges) {
    adj[a].push_back(b);
    adj[b].push_back(a);
  }
  std::vector<int> parent(n_joints, -1);
  std::deque<int> q{root};
  parent[root] = root;  // root points to itself
  while (!q.empty()) {
    int u = q.front();
    q.pop_front();
    for (int v : adj[u]) {
      if (parent[v] < 0) {
        parent[v] = u;
        q.push_back(v);
      }
    }
  }
  return parent;
}

SkeletonTopology make_topology(std::string name, int n_joints,
                               std::vector<std::pair<int, int>> edges,
                               int center_joint) {
  SkeletonTopology t;
  t.name = std::move(name);
  t.n_joints = n_joints;
  t.edges = std::move(edges);
  t.hop = hop_distance(t.edges, n_joints);
  t.center_joint = center_joint;
  t.parent = parent_array(t.edges, n_joints, center_joint);
  return t;
}

SkeletonTopology load_topology(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot open topology file " + path);
  int n = 0;
  if (!(f >> n) || n <= 0) {
    throw DataError("topology file " + path + ": bad joint count");
  }
  std::vector<std::pair<int, int>> edges;
  int a, b;
  while (f >> a >> b) edges.emplace_back(a, b);
  std::string base = path;
  auto slash = base.find_last_of('/');
  if (slash != std::string::npos) base = base.substr(slash + 1);
  auto dot = base.find_last_of('.');
  if (dot != std::string::npos) base = base.substr(0, dot);
  int center = base == "ntu25" ? 1 : 0;
  return make_topology(base, n, std::move(edges), center);
}

void save_topology(const SkeletonTopology& topo, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write topology file " + path);
  f << topo.n_joints << "\n";
  for (auto [a, b] : topo.edges) f << a << " " << b << "\n";
}

SkeletonTopology builtin_topology(const std::string& name) {
  if (name == "ntu25") {
    // 25-joint Kinect v2 skeleton, zero-indexed
    std::vector<std::pair<int, int>> e = {
        {0, 1},   {1, 20},  {2, 20},  {3, 2},   {4, 20},  {5, 4},
        {6, 5},   {7, 6},   {8, 20},  {9, 8},   {10, 9},  {11, 10},
        {12, 0},  {13, 12}, {14, 13}, {15, 14}, {16, 0},  {17, 16},
        {18, 17}, {19, 18}, {21, 22}, {22, 7},  {23, 24}, {24, 11}};
    return make_topology("ntu25", 25, std::move(e), 1);
  }
  if (name == "ucla20") {
    // 20-joint Kinect v1 skeleton
    std::vector<std::pair<int, int>> e = {
        {0, 1},   {1, 2},   {2, 3},   {2, 4},   {4, 5},   {5, 6},  {6, 7},
        {2, 8},   {8, 9},   {9, 10},  {10, 11}, {0, 12},  {12, 13},
        {13, 14}, {14, 15}, {0, 16},  {16, 17}, {17, 18}, {18, 19}};
    return make_topology("ucla20", 20, std::move(e), 0);
  }
  if (name == "synth11") {
    // toy humanoid: pelvis(0), spine(1), head(2), arms 3-4-5 / 6-7-8
    // hang off the spine, legs 9 / 10 off the pelvis
    std::vector<std::pair<int, int>> e = {{0, 1}, {1, 2}, {1, 3}, {3, 4},
                                          {4, 5}, {1, 6}, {6, 7}, {7, 8},
                                          {0, 9}, {0, 10}};
    return make_topology("synth11", 11, std::move(e), 0);
  }
  throw ConfigError("unknown topology '" + name +
                    "' (known: ntu25, ucla20, synth11)");
}

}  // namespace skelmamba
