#include "gridflow/graph_batch.hpp"

namespace gridflow {

GraphBatch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices) {
    GraphBatch batch;
    batch.n_graphs = indices.size();
    batch.node_offset.push_back(0);
    std::vector<std::size_t> src, dst, graph_of, feature_row;
    batch.distinct_edge_features.assign(kEdgeFeatureDim, 0.0);
    auto ybus = std::make_shared<ad::ComplexSparse>();

    for (std::size_t g = 0; g < indices.size(); ++g) {
        const Sample& s = samples.at(indices[g]);
        const std::size_t offset = batch.n_nodes;
        const std::size_t n = s.grid.size();
        std::size_t free = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const auto& bus = s.grid.buses[i];
            graph_of.push_back(g);
            batch.v_init.push_back(s.init.v_mag[i]);
            batch.theta_init.push_back(s.init.theta[i]);
            batch.p_set.push_back(bus.p_set);
            batch.q_set.push_back(bus.q_set);
            batch.free_mask.push_back(bus.type == BusType::Slack ? 0.0 : 1.0);
            batch.p_mask.push_back(bus.type == BusType::Slack ? 0.0 : 1.0);
            batch.q_mask.push_back(bus.type == BusType::PQ ? 1.0 : 0.0);
            batch.v_target.push_back(s.target.v_mag[i]);
            batch.theta_target.push_back(s.target.theta[i]);
            if (bus.type != BusType::Slack) ++free;
        }
        batch.node_features.insert(batch.node_features.end(), s.node_x.begin(), s.node_x.end());
        for (std::size_t l = 0; l < s.grid.lines.size(); ++l) {
            const auto& line = s.grid.lines[l];
            const auto& feat = s.edge_e[l];
            const std::size_t row = batch.distinct_edge_features.size() / kEdgeFeatureDim;
            batch.distinct_edge_features.insert(batch.distinct_edge_features.end(), feat.begin(), feat.end());
            feature_row.push_back(row);
            feature_row.push_back(row);
            src.push_back(offset + line.to);
            dst.push_back(offset + line.from);
            batch.edge_features.insert(batch.edge_features.end(), feat.begin(), feat.end());
            src.push_back(offset + line.from);
            dst.push_back(offset + line.to);
            batch.edge_features.insert(batch.edge_features.end(), feat.begin(), feat.end());
        }
        for (std::size_t i = 0; i < n; ++i) {
            src.push_back(offset + i);
            dst.push_back(offset + i);
            feature_row.push_back(0);
            batch.edge_features.insert(batch.edge_features.end(), kEdgeFeatureDim, 0.0);
        }
        for (std::size_t i = 0; i < n; ++i) {
            ybus->row.push_back(offset + i);
            ybus->col.push_back(offset + i);
            ybus->g.push_back(s.ybus.diagonal(i).real());
            ybus->b.push_back(s.ybus.diagonal(i).imag());
        }
        for (const auto& e : s.ybus.off_diagonal()) {
            ybus->row.push_back(offset + e.row);
            ybus->col.push_back(offset + e.col);
            ybus->g.push_back(e.value.real());
            ybus->b.push_back(e.value.imag());
        }
        batch.n_nodes += n;
        batch.node_offset.push_back(batch.n_nodes);
        batch.free_count.push_back(free);
    }
    ybus->n = batch.n_nodes;
    batch.n_edges = src.size();
    batch.src = ad::make_index(std::move(src));
    batch.dst = ad::make_index(std::move(dst));
    batch.graph_of = ad::make_index(std::move(graph_of));
    batch.edge_feature_row = ad::make_index(std::move(feature_row));
    batch.ybus = std::move(ybus);
    return batch;
}

GraphBatch make_batch(const Sample& sample) {
    const std::vector<Sample> one{sample};
    const std::size_t index = 0;
    return make_batch(one, std::span<const std::size_t>(&index, 1));
}

}  // namespace gridflow
