#pragma once

#include <memory>
#include <span>
#include <vector>

#include "gridflow/autodiff.hpp"
#include "gridflow/dataset.hpp"

namespace gridflow {

/// Several grids concatenated into one block-diagonal graph. Directed edges
/// cover both directions of every line plus one self-loop per node; the
/// self-loop carries an all-zero edge feature vector.
struct GraphBatch {
    std::size_t n_nodes = 0;
    std::size_t n_graphs = 0;
    std::size_t n_edges = 0;
    std::vector<std::size_t> node_offset;  // n_graphs + 1 entries
    std::vector<std::size_t> free_count;   // non-slack buses per graph

    ad::Index src;       // message source j
    ad::Index dst;       // receiving node i
    ad::Index graph_of;  // node -> graph

    std::vector<double> node_features;  // n_nodes x kNodeFeatureDim
    std::vector<double> edge_features;  // n_edges x kEdgeFeatureDim
    // Both directions of a line and every self-loop share a feature vector;
    // edge e uses row edge_feature_row[e] of the distinct rows below. Row 0
    // is the all-zero self-loop vector.
    std::vector<double> distinct_edge_features;
    ad::Index edge_feature_row;

    std::vector<double> v_init;
    std::vector<double> theta_init;
    std::vector<double> p_set;
    std::vector<double> q_set;
    std::vector<double> free_mask;  // 0 at the slack bus
    std::vector<double> p_mask;     // PV + PQ
    std::vector<double> q_mask;     // PQ only
    std::vector<double> v_target;
    std::vector<double> theta_target;

    std::shared_ptr<const ad::ComplexSparse> ybus;
};

GraphBatch make_batch(const std::vector<Sample>& samples, std::span<const std::size_t> indices);
GraphBatch make_batch(const Sample& sample);

}  // namespace gridflow
