#pragma once

// Synthetic navigable environments: a connectivity graph with landmarked
// nodes, 36-view panoramic observations per viewpoint, deterministic
// per-view feature synthesis, templated instructions, a shortest-path
// teacher, and episode stepping.
//
// Conventions (also written into world files):
//   heading   theta in [0, 360): degrees clockwise from the +y axis,
//             so a neighbor due +x is at 90 degrees
//   elevation phi: degrees above the horizontal plane
//   view grid: 12 headings (0,30,...,330) x 3 elevations (-30,0,30),
//             enumerated elevation-major: index = elev_row*12 + heading_col

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "slotnav/archive.hpp"
#include "slotnav/rng.hpp"

namespace slotnav {

// ---------------------------------------------------------------------------
// view grid
// ---------------------------------------------------------------------------

namespace grid {

constexpr std::size_t kHeadings = 12;
constexpr std::size_t kElevations = 3;
constexpr std::size_t kCells = kHeadings * kElevations;  // 36

inline double heading_of(std::size_t cell) { return 30.0 * static_cast<double>(cell % kHeadings); }
inline double elevation_of(std::size_t cell) {
  return -30.0 + 30.0 * static_cast<double>(cell / kHeadings);
}

/// Absolute circular difference between two headings, in [0, 180].
inline double heading_diff(double a, double b) {
  double d = std::fmod(std::abs(a - b), 360.0);
  return d > 180.0 ? 360.0 - d : d;
}

/// Nearest grid cell to exact view angles (heading circular, elevation
/// clamped to the three grid rows).
inline std::size_t snap(double theta, double phi) {
  const std::size_t col =
      static_cast<std::size_t>(std::llround(theta / 30.0)) % kHeadings;
  std::size_t row = 1;
  double best = std::abs(phi - 0.0);
  if (std::abs(phi - (-30.0)) < best) {
    best = std::abs(phi + 30.0);
    row = 0;
  }
  if (std::abs(phi - 30.0) < best) row = 2;
  return row * kHeadings + col;
}

}  // namespace grid

enum class Modality : std::size_t { rgb = 0, dep = 1, nor = 2 };
constexpr std::size_t kModalities = 3;
inline const char* modality_name(Modality m) {
  switch (m) {
    case Modality::rgb: return "rgb";
    case Modality::dep: return "dep";
    default: return "nor";
  }
}

// instruction vocabulary
namespace vocab {
constexpr std::size_t PAD = 0;
constexpr std::size_t GO = 1;
constexpr std::size_t STOP_TOK = 2;
constexpr std::size_t kSpecial = 3;
inline std::size_t landmark_token(std::size_t landmark) { return kSpecial + landmark; }
inline std::size_t size(std::size_t n_landmarks) { return kSpecial + n_landmarks; }
}  // namespace vocab

// ---------------------------------------------------------------------------
// world graph
// ---------------------------------------------------------------------------

struct WorldNode {
  int id = 0;
  double x = 0, y = 0, z = 0;
  int landmark = 0;
};

struct WorldGraph {
  std::uint64_t seed = 0;
  double extent = 20.0;
  std::size_t n_landmarks = 24;
  std::vector<WorldNode> nodes;
  std::vector<std::vector<int>> adj;          // sorted neighbor ids
  std::vector<std::pair<int, int>> edges;     // u < v

  std::size_t size() const { return nodes.size(); }

  double distance(int a, int b) const {
    const auto& p = nodes[a];
    const auto& q = nodes[b];
    const double dx = p.x - q.x, dy = p.y - q.y, dz = p.z - q.z;
    return std::sqrt(dx * dx + dy * dy + dz * dz);
  }

  /// Exact view angles of the displacement from node a toward node b.
  std::pair<double, double> view_angles(int a, int b) const {
    const auto& p = nodes[a];
    const auto& q = nodes[b];
    const double dx = q.x - p.x, dy = q.y - p.y, dz = q.z - p.z;
    double theta = std::atan2(dx, dy) * 180.0 / M_PI;  // clockwise from +y
    if (theta < 0.0) theta += 360.0;
    const double horiz = std::sqrt(dx * dx + dy * dy);
    const double phi = std::atan2(dz, horiz) * 180.0 / M_PI;
    return {theta, phi};
  }

  /// Hop distances from `from` to every node (BFS); unreachable = SIZE_MAX.
  std::vector<std::size_t> hop_distances(int from) const {
    std::vector<std::size_t> dist(nodes.size(), std::numeric_limits<std::size_t>::max());
    std::deque<int> q{from};
    dist[from] = 0;
    while (!q.empty()) {
      const int u = q.front();
      q.pop_front();
      for (int v : adj[u])
        if (dist[v] == std::numeric_limits<std::size_t>::max()) {
          dist[v] = dist[u] + 1;
          q.push_back(v);
        }
    }
    return dist;
  }

  bool connected() const {
    if (nodes.empty()) return true;
    const auto d = hop_distances(0);
    return std::none_of(d.begin(), d.end(), [](std::size_t x) {
      return x == std::numeric_limits<std::size_t>::max();
    });
  }
};

namespace detail {

// Edges steeper than 45 degrees would snap worse than 15 degrees in
// elevation, so generation avoids them where it can.
inline bool steep(const WorldGraph& w, int a, int b) {
  return std::abs(w.view_angles(a, b).second) > 45.0;
}

inline void add_edge(WorldGraph& w, int a, int b) {
  if (a == b) return;
  const int u = std::min(a, b), v = std::max(a, b);
  if (std::find(w.adj[u].begin(), w.adj[u].end(), v) != w.adj[u].end()) return;
  w.adj[u].push_back(v);
  w.adj[v].push_back(u);
  w.edges.emplace_back(u, v);
}

}  // namespace detail

/// Deterministic world: node positions uniform in [0,extent]^2 x [0,extent/4],
/// each node linked to its k nearest (preferring non-steep) neighbors, then
/// extra edges until the graph is connected.
inline WorldGraph generate_world(std::size_t n_nodes, double extent, std::size_t k_nearest,
                                 std::uint64_t seed, std::size_t n_landmarks = 24) {
  if (n_nodes < 2) throw std::invalid_argument("generate_world: need at least 2 nodes");
  WorldGraph w;
  w.seed = seed;
  w.extent = extent;
  w.n_landmarks = n_landmarks;
  Rng rng(mix_seed(seed, 0x11));
  w.nodes.resize(n_nodes);
  for (std::size_t i = 0; i < n_nodes; ++i) {
    auto& n = w.nodes[i];
    n.id = static_cast<int>(i);
    n.x = rng.uniform() * extent;
    n.y = rng.uniform() * extent;
    n.z = rng.uniform() * extent / 4.0;
    n.landmark = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(n_landmarks) - 1));
  }
  w.adj.assign(n_nodes, {});

  const std::size_t max_degree = grid::kCells;
  for (std::size_t i = 0; i < n_nodes; ++i) {
    std::vector<int> order;
    for (std::size_t j = 0; j < n_nodes; ++j)
      if (j != i) order.push_back(static_cast<int>(j));
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      const double da = w.distance(static_cast<int>(i), a);
      const double db = w.distance(static_cast<int>(i), b);
      if (da != db) return da < db;
      return a < b;
    });
    std::size_t added = 0;
    for (int cand : order) {  // flat edges first
      if (added >= k_nearest) break;
      if (detail::steep(w, static_cast<int>(i), cand)) continue;
      if (w.adj[i].size() >= max_degree || w.adj[cand].size() >= max_degree) continue;
      detail::add_edge(w, static_cast<int>(i), cand);
      ++added;
    }
    for (int cand : order) {  // fall back to nearest regardless of slope
      if (added >= k_nearest) break;
      if (w.adj[i].size() >= max_degree || w.adj[cand].size() >= max_degree) continue;
      if (std::find(w.adj[i].begin(), w.adj[i].end(), cand) != w.adj[i].end()) continue;
      detail::add_edge(w, static_cast<int>(i), cand);
      ++added;
    }
  }

  // join components, preferring flat then short links
  while (!w.connected()) {
    const auto d = w.hop_distances(0);
    int best_a = -1, best_b = -1;
    bool best_steep = true;
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < n_nodes; ++a) {
      if (d[a] == std::numeric_limits<std::size_t>::max()) continue;
      for (std::size_t b = 0; b < n_nodes; ++b) {
        if (d[b] != std::numeric_limits<std::size_t>::max()) continue;
        if (w.adj[a].size() >= max_degree || w.adj[b].size() >= max_degree) continue;
        const bool s = detail::steep(w, static_cast<int>(a), static_cast<int>(b));
        const double dist = w.distance(static_cast<int>(a), static_cast<int>(b));
        if (std::make_tuple(s, dist, a, b) <
            std::make_tuple(best_steep, best_dist, static_cast<std::size_t>(best_a),
                            static_cast<std::size_t>(best_b))) {
          best_steep = s;
          best_dist = dist;
          best_a = static_cast<int>(a);
          best_b = static_cast<int>(b);
        }
      }
    }
    if (best_a < 0) throw std::runtime_error("generate_world: cannot connect graph");
    detail::add_edge(w, best_a, best_b);
  }

  for (auto& nbrs : w.adj) std::sort(nbrs.begin(), nbrs.end());
  std::sort(w.edges.begin(), w.edges.end());
  return w;
}

// ---------------------------------------------------------------------------
// feature synthesis
// ---------------------------------------------------------------------------

struct FeatureConfig {
  std::size_t d_m = 64;
  std::uint64_t feature_seed = 7177;  // shared across worlds so landmarks transfer
  double noise_sigma = 0.05;
  double dep_bucket_width = 1.0;
  std::size_t dep_buckets = 16;
};

/// Deterministic per-view features. Cells through which an edge leaves the
/// viewpoint encode the neighbor (landmark embedding / distance bucket /
/// direction projection); all other cells carry a reserved WALL vector.
/// Seeded Gaussian noise (per world seed, node, cell, modality) is added on
/// top. An externally supplied archive of per-view features overrides
/// synthesis entirely.
class FeatureProvider {
 public:
  explicit FeatureProvider(FeatureConfig cfg) : cfg_(cfg) {
    Rng rgb_rng(mix_seed(cfg.feature_seed, 1));
    Rng dep_rng(mix_seed(cfg.feature_seed, 2));
    Rng nor_rng(mix_seed(cfg.feature_seed, 3));
    // table rows have unit-variance entries so the sigma=0.05 noise stays
    // small relative to the signal
    const std::size_t d = cfg.d_m;
    auto fill = [&](std::vector<double>& t, std::size_t rows, Rng& rng) {
      t.resize(rows * d);
      for (auto& v : t) v = rng.gaussian();
    };
    rgb_rows_ = 512;  // landmark pool cap, shared across worlds; last row is WALL
    fill(rgb_table_, rgb_rows_ + 1, rgb_rng);
    fill(dep_table_, cfg.dep_buckets + 1, dep_rng);
    dir_proj_.resize(3 * d);
    for (auto& v : dir_proj_) v = nor_rng.gaussian();
    nor_wall_.resize(d);
    for (auto& v : nor_wall_) v = nor_rng.gaussian();
  }

  const FeatureConfig& config() const { return cfg_; }

  void set_override(Archive archive) { override_ = std::move(archive); }
  bool has_override() const { return override_.has_value(); }

  static std::string view_key(int node, std::size_t cell, Modality m) {
    return "view." + std::to_string(node) + "." + std::to_string(cell) + "." + modality_name(m);
  }

  std::vector<double> synthesize(const WorldGraph& w, int viewpoint, std::size_t cell,
                                 Modality m) const {
    if (cell >= grid::kCells) throw std::invalid_argument("synthesize: bad cell");
    if (override_) {
      const auto& e = override_->at(view_key(viewpoint, cell, m));
      if (e.data.size() != cfg_.d_m)
        throw std::runtime_error("feature override: wrong width for " +
                                 view_key(viewpoint, cell, m));
      return e.data;
    }
    const std::size_t d = cfg_.d_m;
    std::vector<double> out(d);
    const int nb = cell_neighbor(w, viewpoint, cell);
    switch (m) {
      case Modality::rgb: {
        const std::size_t rowi = nb < 0 ? rgb_rows_ : static_cast<std::size_t>(w.nodes[nb].landmark);
        if (rowi > rgb_rows_)
          throw std::invalid_argument("synthesize: landmark id exceeds table (" +
                                      std::to_string(rowi) + " > " + std::to_string(rgb_rows_) + ")");
        std::copy_n(rgb_table_.begin() + rowi * d, d, out.begin());
        break;
      }
      case Modality::dep: {
        std::size_t rowi = cfg_.dep_buckets;  // WALL
        if (nb >= 0) {
          const double dist = w.distance(viewpoint, nb);
          rowi = std::min<std::size_t>(static_cast<std::size_t>(std::floor(dist / cfg_.dep_bucket_width)),
                                       cfg_.dep_buckets - 1);
        }
        std::copy_n(dep_table_.begin() + rowi * d, d, out.begin());
        break;
      }
      case Modality::nor: {
        if (nb < 0) {
          out = nor_wall_;
        } else {
          const auto& p = w.nodes[viewpoint];
          const auto& q = w.nodes[nb];
          double dx = q.x - p.x, dy = q.y - p.y, dz = q.z - p.z;
          const double norm = std::sqrt(dx * dx + dy * dy + dz * dz);
          dx /= norm;
          dy /= norm;
          dz /= norm;
          // unit direction through a fixed projection; entries stay ~N(0,1)
          for (std::size_t j = 0; j < d; ++j)
            out[j] = dx * dir_proj_[j] + dy * dir_proj_[d + j] + dz * dir_proj_[2 * d + j];
        }
        break;
      }
    }
    Rng noise(mix_seed(w.seed, static_cast<std::uint64_t>(viewpoint), cell,
                       static_cast<std::uint64_t>(m)));
    for (auto& v : out) v += cfg_.noise_sigma * noise.gaussian();
    return out;
  }

  /// Neighbor whose edge leaves `viewpoint` through `cell`, or -1 (WALL).
  /// When several neighbors snap to one cell the angularly closest (then
  /// smallest id) wins.
  int cell_neighbor(const WorldGraph& w, int viewpoint, std::size_t cell) const {
    int best = -1;
    double best_err = std::numeric_limits<double>::infinity();
    for (int nb : w.adj[viewpoint]) {
      const auto [theta, phi] = w.view_angles(viewpoint, nb);
      if (grid::snap(theta, phi) != cell) continue;
      const double err = grid::heading_diff(theta, grid::heading_of(cell)) +
                         std::abs(phi - grid::elevation_of(cell));
      if (err < best_err) {
        best_err = err;
        best = nb;
      }
    }
    return best;
  }

 private:
  FeatureConfig cfg_;
  std::vector<double> rgb_table_, dep_table_, dir_proj_, nor_wall_;
  std::size_t rgb_rows_ = 0;
  std::optional<Archive> override_;
};

// ---------------------------------------------------------------------------
// observations
// ---------------------------------------------------------------------------

struct Candidate {
  int target_node = -1;
  double theta = 0.0;
  double phi = 0.0;
  std::size_t grid_index = 0;
  std::vector<double> features[kModalities];  // copied from the panorama cell
};

struct Observation {
  int viewpoint = -1;
  // panorama[m] is 36 rows of d_m values, row-major
  std::vector<double> panorama[kModalities];
  std::vector<Candidate> candidates;
  std::size_t d_m = 0;
};

inline Observation observe(const WorldGraph& w, const FeatureProvider& features, int node) {
  if (node < 0 || static_cast<std::size_t>(node) >= w.size())
    throw std::invalid_argument("observe: unknown node " + std::to_string(node));
  Observation obs;
  obs.viewpoint = node;
  obs.d_m = features.config().d_m;
  const std::size_t d = obs.d_m;
  for (std::size_t m = 0; m < kModalities; ++m) {
    obs.panorama[m].resize(grid::kCells * d);
    for (std::size_t cell = 0; cell < grid::kCells; ++cell) {
      const auto v = features.synthesize(w, node, cell, static_cast<Modality>(m));
      std::copy(v.begin(), v.end(), obs.panorama[m].begin() + cell * d);
    }
  }
  for (int nb : w.adj[node]) {  // sorted ids => deterministic candidate order
    Candidate c;
    c.target_node = nb;
    std::tie(c.theta, c.phi) = w.view_angles(node, nb);
    c.grid_index = grid::snap(c.theta, c.phi);
    for (std::size_t m = 0; m < kModalities; ++m) {
      c.features[m].assign(obs.panorama[m].begin() + c.grid_index * d,
                           obs.panorama[m].begin() + (c.grid_index + 1) * d);
    }
    obs.candidates.push_back(std::move(c));
  }
  return obs;
}

// ---------------------------------------------------------------------------
// episodes
// ---------------------------------------------------------------------------

struct Episode {
  const WorldGraph* world = nullptr;
  std::string world_file;  // provenance for split files / dumps
  int start = -1;
  int goal = -1;
  std::uint64_t seed = 0;
  std::vector<int> gt_path;             // shortest path, start..goal
  std::vector<std::size_t> instruction; // GO, landmarks after start, STOP_TOK
  std::size_t max_steps = 15;
  std::vector<std::size_t> dist_to_goal_hops;  // BFS from goal

  double gt_length() const {
    double acc = 0.0;
    for (std::size_t i = 1; i < gt_path.size(); ++i)
      acc += world->distance(gt_path[i - 1], gt_path[i]);
    return acc;
  }
};

/// Shortest path by BFS with the lexicographically smallest node sequence on
/// ties, realized by greedily taking the smallest-id neighbor that reduces
/// the hop distance to the goal.
inline Episode make_episode(const WorldGraph& w, int start, int goal, std::uint64_t seed,
                            std::size_t max_steps = 15) {
  if (start == goal) throw std::invalid_argument("make_episode: start equals goal");
  if (start < 0 || goal < 0 || static_cast<std::size_t>(start) >= w.size() ||
      static_cast<std::size_t>(goal) >= w.size())
    throw std::invalid_argument("make_episode: node out of range");
  Episode ep;
  ep.world = &w;
  ep.start = start;
  ep.goal = goal;
  ep.seed = seed;
  ep.max_steps = max_steps;
  ep.dist_to_goal_hops = w.hop_distances(goal);
  if (ep.dist_to_goal_hops[start] == std::numeric_limits<std::size_t>::max())
    throw std::invalid_argument("make_episode: goal unreachable from start");
  int cur = start;
  ep.gt_path.push_back(cur);
  while (cur != goal) {
    int next = -1;
    for (int nb : w.adj[cur])
      if (ep.dist_to_goal_hops[nb] + 1 == ep.dist_to_goal_hops[cur]) {
        next = nb;
        break;  // adj sorted => smallest id
      }
    cur = next;
    ep.gt_path.push_back(cur);
  }
  ep.instruction.push_back(vocab::GO);
  for (std::size_t i = 1; i < ep.gt_path.size(); ++i)
    ep.instruction.push_back(vocab::landmark_token(w.nodes[ep.gt_path[i]].landmark));
  ep.instruction.push_back(vocab::STOP_TOK);
  return ep;
}

/// Index of the stop action given K candidates.
inline std::size_t stop_action(std::size_t n_candidates) { return n_candidates; }

/// Teacher: stop at the goal, otherwise the candidate whose target minimizes
/// the remaining hop distance to the goal (recomputed from the current node,
/// so the teacher recovers from deviations); ties break toward the smallest
/// candidate index.
inline std::size_t teacher_action(const Episode& ep, int current,
                                  const std::vector<Candidate>& candidates) {
  if (current == ep.goal) return stop_action(candidates.size());
  std::size_t best = 0;
  std::size_t best_d = std::numeric_limits<std::size_t>::max();
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    const std::size_t d = ep.dist_to_goal_hops[candidates[i].target_node];
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  return best;
}

struct StepResult {
  int next_node = -1;
  bool done = false;
  double distance_to_goal = 0.0;
};

/// Applies action index in [0, K]; K is STOP. steps_taken counts completed
/// actions before this one (the episode is cut off at max_steps).
inline StepResult step(const Episode& ep, int current, std::size_t action,
                       const std::vector<Candidate>& candidates, std::size_t steps_taken) {
  if (action > candidates.size())
    throw std::invalid_argument("step: action " + std::to_string(action) + " out of range, K=" +
                                std::to_string(candidates.size()));
  StepResult r;
  if (action == stop_action(candidates.size())) {
    r.next_node = current;
    r.done = true;
  } else {
    r.next_node = candidates[action].target_node;
    r.done = steps_taken + 1 >= ep.max_steps;
  }
  r.distance_to_goal = ep.world->distance(r.next_node, ep.goal);
  return r;
}

// ---------------------------------------------------------------------------
// world serialization
// ---------------------------------------------------------------------------

inline void save_world(const WorldGraph& w, const std::string& file) {
  namespace fs = std::filesystem;
  const fs::path target(file);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  std::ofstream out(target);
  if (!out) throw std::runtime_error("save_world: cannot open " + file);
  out << "# slotnav world v1\n";
  out << "# heading: degrees clockwise from +y; elevation: degrees above horizontal\n";
  out << "# grid: 12 headings x 3 elevations, elevation-major\n";
  out << "seed " << w.seed << "\n";
  out << "extent ";
  out.precision(17);
  out << w.extent << "\n";
  out << "n_landmarks " << w.n_landmarks << "\n";
  out << "nodes " << w.nodes.size() << "\n";
  for (const auto& n : w.nodes) {
    std::ostringstream line;
    line.precision(17);
    line << n.id << " " << n.x << " " << n.y << " " << n.z << " " << n.landmark;
    out << line.str() << "\n";
  }
  out << "edges " << w.edges.size() << "\n";
  for (const auto& [a, b] : w.edges) out << a << " " << b << "\n";
  if (!out) throw std::runtime_error("save_world: write failed for " + file);
}

inline WorldGraph load_world(const std::string& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("load_world: cannot open " + file);
  WorldGraph w;
  std::string line;
  std::size_t n_nodes = 0, n_edges = 0;
  enum { header, node_rows, edge_rows } state = header;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    if (state == header) {
      std::string key;
      ls >> key;
      if (key == "seed") ls >> w.seed;
      else if (key == "extent") ls >> w.extent;
      else if (key == "n_landmarks") ls >> w.n_landmarks;
      else if (key == "nodes") {
        ls >> n_nodes;
        w.nodes.reserve(n_nodes);
        state = node_rows;
      } else
        throw std::runtime_error("load_world: unexpected key '" + key + "' in " + file);
    } else if (state == node_rows) {
      WorldNode n;
      ls >> n.id >> n.x >> n.y >> n.z >> n.landmark;
      w.nodes.push_back(n);
      if (w.nodes.size() == n_nodes) {
        // expect the edges header next
        std::getline(in, line);
        std::istringstream es(line);
        std::string key;
        es >> key >> n_edges;
        if (key != "edges") throw std::runtime_error("load_world: missing edges header");
        state = edge_rows;
      }
    } else {
      int a, b;
      ls >> a >> b;
      w.edges.emplace_back(a, b);
    }
  }
  if (w.nodes.size() != n_nodes || w.edges.size() != n_edges)
    throw std::runtime_error("load_world: truncated file " + file);
  w.adj.assign(w.nodes.size(), {});
  for (const auto& [a, b] : w.edges) {
    w.adj[a].push_back(b);
    w.adj[b].push_back(a);
  }
  for (auto& nbrs : w.adj) std::sort(nbrs.begin(), nbrs.end());
  return w;
}

}  // namespace slotnav
