#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <optional>
#include <queue>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "incflow/errors.hpp"
#include "incflow/linalg.hpp"

namespace incflow::network {

enum class NodeKind { intersection, entry, exit };

inline const char* to_string(NodeKind k) {
    switch (k) {
        case NodeKind::intersection: return "intersection";
        case NodeKind::entry: return "entry";
        case NodeKind::exit: return "exit";
    }
    return "?";
}

inline NodeKind node_kind_from(const std::string& s) {
    if (s == "intersection") return NodeKind::intersection;
    if (s == "entry") return NodeKind::entry;
    if (s == "exit") return NodeKind::exit;
    throw DataError("network: unknown node kind '" + s + "'");
}

struct Node {
    std::string id;
    double x = 0.0;
    double y = 0.0;
    NodeKind kind = NodeKind::intersection;
    bool operator==(const Node&) const = default;
};

struct Edge {
    std::string id;
    std::size_t from = 0;  // node index
    std::size_t to = 0;
    double length_m = 0.0;
    double vmax_mps = 0.0;
    int lanes = 1;

    double free_flow_time() const { return length_m / vmax_mps; }
    bool operator==(const Edge&) const = default;
};

struct Point {
    double x = 0.0;
    double y = 0.0;
};

/// Directed road network. Diffusion vertices are the road edges: W[i][j] > 0
/// iff a vehicle leaving edge i can enter edge j at the shared node.
class RoadGraph {
   public:
    RoadGraph() = default;
    RoadGraph(std::vector<Node> nodes, std::vector<Edge> edges) : nodes_(std::move(nodes)), edges_(std::move(edges)) {
        validate();
        index();
    }

    const std::vector<Node>& nodes() const noexcept { return nodes_; }
    const std::vector<Edge>& edges() const noexcept { return edges_; }
    std::size_t num_nodes() const noexcept { return nodes_.size(); }
    std::size_t num_edges() const noexcept { return edges_.size(); }
    const Node& node(std::size_t i) const { return nodes_.at(i); }
    const Edge& edge(std::size_t i) const { return edges_.at(i); }

    std::optional<std::size_t> find_node(const std::string& id) const {
        auto it = node_index_.find(id);
        if (it == node_index_.end()) return std::nullopt;
        return it->second;
    }
    std::optional<std::size_t> find_edge(const std::string& id) const {
        auto it = edge_index_.find(id);
        if (it == edge_index_.end()) return std::nullopt;
        return it->second;
    }
    std::size_t edge_index(const std::string& id) const {
        auto e = find_edge(id);
        if (!e) throw DataError("network: unknown edge '" + id + "'");
        return *e;
    }
    std::size_t node_index(const std::string& id) const {
        auto n = find_node(id);
        if (!n) throw DataError("network: unknown node '" + id + "'");
        return *n;
    }

    const std::vector<std::size_t>& out_edges(std::size_t node) const { return out_edges_.at(node); }
    const std::vector<std::size_t>& in_edges(std::size_t node) const { return in_edges_.at(node); }

    /// Point at `offset_m` metres along edge `e`, interpolated on the straight
    /// segment between its end nodes.
    Point position_on_edge(std::size_t e, double offset_m) const {
        const Edge& ed = edges_.at(e);
        const Node& a = nodes_[ed.from];
        const Node& b = nodes_[ed.to];
        const double f = std::clamp(offset_m / ed.length_m, 0.0, 1.0);
        return {a.x + f * (b.x - a.x), a.y + f * (b.y - a.y)};
    }

    /// Unit direction of edge `e` in the plane (zero if its nodes coincide).
    Point direction(std::size_t e) const {
        const Edge& ed = edges_.at(e);
        const double dx = nodes_[ed.to].x - nodes_[ed.from].x;
        const double dy = nodes_[ed.to].y - nodes_[ed.from].y;
        const double n = std::hypot(dx, dy);
        if (n == 0.0) return {0.0, 0.0};
        return {dx / n, dy / n};
    }

    /// Edge-level weighted adjacency. Weight 1 / (1 + d) where d is the
    /// free-flow time between the two edge midpoints.
    Matrix weight_matrix() const {
        const std::size_t n = edges_.size();
        Matrix w(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j : out_edges_[edges_[i].to]) {
                const double d = 0.5 * (edges_[i].free_flow_time() + edges_[j].free_flow_time());
                w(i, j) = 1.0 / (1.0 + d);
            }
        }
        return w;
    }

    /// Fastest free-flow route between two nodes as a list of edge indices.
    /// Ties resolve toward the lower edge index so routes are reproducible.
    std::optional<std::vector<std::size_t>> shortest_path(std::size_t from, std::size_t to) const {
        const double inf = std::numeric_limits<double>::infinity();
        std::vector<double> dist(nodes_.size(), inf);
        std::vector<std::ptrdiff_t> via(nodes_.size(), -1);
        using Item = std::pair<double, std::size_t>;
        std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
        dist[from] = 0.0;
        pq.push({0.0, from});
        while (!pq.empty()) {
            auto [d, u] = pq.top();
            pq.pop();
            if (d > dist[u]) continue;
            if (u == to) break;
            for (std::size_t e : out_edges_[u]) {
                const std::size_t v = edges_[e].to;
                const double nd = d + edges_[e].free_flow_time();
                if (nd < dist[v] || (nd == dist[v] && via[v] >= 0 && e < static_cast<std::size_t>(via[v]))) {
                    dist[v] = nd;
                    via[v] = static_cast<std::ptrdiff_t>(e);
                    pq.push({nd, v});
                }
            }
        }
        if (dist[to] == inf || from == to) return std::nullopt;
        std::vector<std::size_t> path;
        for (std::size_t v = to; v != from;) {
            const auto e = static_cast<std::size_t>(via[v]);
            path.push_back(e);
            v = edges_[e].from;
        }
        std::reverse(path.begin(), path.end());
        return path;
    }

    bool operator==(const RoadGraph& o) const { return nodes_ == o.nodes_ && edges_ == o.edges_; }

   private:
    void validate() const {
        if (nodes_.empty()) throw DataError("network: no nodes");
        if (edges_.empty()) throw DataError("network: no edges");
        std::unordered_map<std::string, int> seen;
        for (const auto& n : nodes_)
            if (seen[n.id]++) throw DataError("network: duplicate node id '" + n.id + "'");
        seen.clear();
        for (const auto& e : edges_) {
            if (seen[e.id]++) throw DataError("network: duplicate edge id '" + e.id + "'");
            if (e.from >= nodes_.size() || e.to >= nodes_.size())
                throw DataError("network: edge '" + e.id + "' references a missing node");
            if (!(e.length_m > 0.0)) throw DataError("network: edge '" + e.id + "' has non-positive length");
            if (!(e.vmax_mps > 0.0)) throw DataError("network: edge '" + e.id + "' has non-positive speed");
            if (e.lanes < 1) throw DataError("network: edge '" + e.id + "' has no lanes");
        }
        // Weak connectivity via union-find over nodes.
        std::vector<std::size_t> parent(nodes_.size());
        for (std::size_t i = 0; i < parent.size(); ++i) parent[i] = i;
        auto find = [&](std::size_t x) {
            while (parent[x] != x) x = parent[x] = parent[parent[x]];
            return x;
        };
        for (const auto& e : edges_) parent[find(e.from)] = find(e.to);
        const std::size_t root = find(0);
        for (std::size_t i = 1; i < nodes_.size(); ++i)
            if (find(i) != root) throw DataError("network: graph is not weakly connected (node '" + nodes_[i].id + "')");
    }

    void index() {
        out_edges_.assign(nodes_.size(), {});
        in_edges_.assign(nodes_.size(), {});
        for (std::size_t i = 0; i < nodes_.size(); ++i) node_index_[nodes_[i].id] = i;
        for (std::size_t i = 0; i < edges_.size(); ++i) {
            edge_index_[edges_[i].id] = i;
            out_edges_[edges_[i].from].push_back(i);
            in_edges_[edges_[i].to].push_back(i);
        }
    }

    std::vector<Node> nodes_;
    std::vector<Edge> edges_;
    std::unordered_map<std::string, std::size_t> node_index_;
    std::unordered_map<std::string, std::size_t> edge_index_;
    std::vector<std::vector<std::size_t>> out_edges_;
    std::vector<std::vector<std::size_t>> in_edges_;
};

inline RoadGraph graph_from_json(const nlohmann::json& doc) {
    try {
        if (!doc.is_object() || !doc.contains("nodes") || !doc.contains("edges"))
            throw DataError("network: document needs 'nodes' and 'edges' arrays");
        std::vector<Node> nodes;
        std::unordered_map<std::string, std::size_t> idx;
        for (const auto& n : doc.at("nodes")) {
            Node node{n.at("id").get<std::string>(), n.at("x").get<double>(), n.at("y").get<double>(),
                      node_kind_from(n.value("kind", std::string("intersection")))};
            idx.emplace(node.id, nodes.size());
            nodes.push_back(std::move(node));
        }
        std::vector<Edge> edges;
        for (const auto& e : doc.at("edges")) {
            const auto from = e.at("from").get<std::string>();
            const auto to = e.at("to").get<std::string>();
            const auto id = e.at("id").get<std::string>();
            if (!idx.contains(from)) throw DataError("network: edge '" + id + "' references missing node '" + from + "'");
            if (!idx.contains(to)) throw DataError("network: edge '" + id + "' references missing node '" + to + "'");
            edges.push_back(Edge{id, idx[from], idx[to], e.at("length_m").get<double>(), e.at("vmax_mps").get<double>(),
                                 e.value("lanes", 1)});
        }
        return RoadGraph(std::move(nodes), std::move(edges));
    } catch (const nlohmann::json::exception& ex) {
        throw DataError(std::string("network: schema violation: ") + ex.what());
    }
}

/// Parses and validates a network document.
inline RoadGraph load_graph(const std::string& content) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(content);
    } catch (const nlohmann::json::parse_error& ex) {
        throw DataError(std::string("network: invalid JSON: ") + ex.what());
    }
    return graph_from_json(doc);
}

inline nlohmann::json to_json(const RoadGraph& g) {
    nlohmann::json doc;
    doc["nodes"] = nlohmann::json::array();
    doc["edges"] = nlohmann::json::array();
    for (const auto& n : g.nodes()) doc["nodes"].push_back({{"id", n.id}, {"x", n.x}, {"y", n.y}, {"kind", to_string(n.kind)}});
    for (const auto& e : g.edges())
        doc["edges"].push_back({{"id", e.id},
                                {"from", g.node(e.from).id},
                                {"to", g.node(e.to).id},
                                {"length_m", e.length_m},
                                {"vmax_mps", e.vmax_mps},
                                {"lanes", e.lanes}});
    return doc;
}

inline std::string serialize(const RoadGraph& g) { return to_json(g).dump(2); }

struct GridParams {
    int rows = 3;
    int cols = 3;
    double block_m = 100.0;
    double vmax_mps = 13.89;
    int lanes = 1;
};

/// Grid of perpendicular two-way corridors. Boundary nodes are entries (and
/// double as exits); interior nodes are unsignalized intersections.
inline RoadGraph gen_grid(const GridParams& p) {
    if (p.rows < 2 || p.cols < 2) throw ConfigError("gen-grid: rows and cols must be >= 2");
    if (!(p.block_m > 0.0)) throw ConfigError("gen-grid: block length must be positive");
    std::vector<Node> nodes;
    auto nid = [](int r, int c) { return "n" + std::to_string(r) + "_" + std::to_string(c); };
    for (int r = 0; r < p.rows; ++r)
        for (int c = 0; c < p.cols; ++c) {
            const bool boundary = r == 0 || c == 0 || r == p.rows - 1 || c == p.cols - 1;
            nodes.push_back({nid(r, c), c * p.block_m, r * p.block_m, boundary ? NodeKind::entry : NodeKind::intersection});
        }
    auto at = [&](int r, int c) { return static_cast<std::size_t>(r * p.cols + c); };
    std::vector<Edge> edges;
    auto link = [&](int r0, int c0, int r1, int c1) {
        edges.push_back({nid(r0, c0) + "-" + nid(r1, c1), at(r0, c0), at(r1, c1), p.block_m, p.vmax_mps, p.lanes});
    };
    for (int r = 0; r < p.rows; ++r)
        for (int c = 0; c + 1 < p.cols; ++c) {
            link(r, c, r, c + 1);
            link(r, c + 1, r, c);
        }
    for (int c = 0; c < p.cols; ++c)
        for (int r = 0; r + 1 < p.rows; ++r) {
            link(r, c, r + 1, c);
            link(r + 1, c, r, c);
        }
    return RoadGraph(std::move(nodes), std::move(edges));
}

struct TransitionPair {
    Matrix forward;   // D_O^-1 W
    Matrix backward;  // D_I^-1 W^T
};

/// Row-normalised random-walk matrices for both diffusion directions.
/// Zero-degree rows stay zero; no self-loops are injected.
inline TransitionPair transition_matrices(const Matrix& w) {
    if (!w.square()) throw std::invalid_argument("transition_matrices: W must be square, got " + shape_str(w));
    for (double v : w.data())
        if (v < 0.0 || std::isnan(v)) throw std::invalid_argument("transition_matrices: W has a negative entry");
    auto normalise = [](const Matrix& m) {
        Matrix s(m.rows(), m.cols());
        for (std::size_t i = 0; i < m.rows(); ++i) {
            double deg = 0.0;
            for (double v : m.row(i)) deg += v;
            if (deg == 0.0) continue;
            for (std::size_t j = 0; j < m.cols(); ++j) s(i, j) = m(i, j) / deg;
        }
        return s;
    };
    return {normalise(w), normalise(transpose(w))};
}

/// S^k X by k successive products.
inline Matrix matrix_power_apply(const Matrix& s, int k, const Matrix& x) {
    if (k < 0) throw std::invalid_argument("matrix_power_apply: negative hop count");
    if (!s.square() || s.cols() != x.rows())
        throw std::invalid_argument("matrix_power_apply: dimension mismatch " + shape_str(s) + " vs " + shape_str(x));
    Matrix out = x;
    for (int i = 0; i < k; ++i) out = matmul(s, out);
    return out;
}

}  // namespace incflow::network
