#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "mstrnn/dataset.hpp"
#include "mstrnn/model.hpp"

namespace mstrnn {

/// Row-major activation record of one sample: rows are time steps (T + d of
/// them), columns the flattened units of the recorded stage.
struct ActivationMatrix {
    Tensor rows;  // n x D
    std::string sample_dir;
    std::vector<int> labels;  // per head, model order
};

/// Principal-component basis: mean vector, orthonormal components (columns),
/// eigenvalues sorted descending. Sign convention: the largest-magnitude
/// entry of each component is positive.
struct PcaBasis {
    std::vector<double> mean;
    Tensor components;  // D x D, column k = component k
    std::vector<double> eigenvalues;
};

/// Mean-centered covariance eigendecomposition (cyclic Jacobi). Rank-deficient
/// input is fine; trailing eigenvalues come out zero.
PcaBasis pca_fit(const Tensor& rows);

/// (x - mean) projected onto the first k components; output is n x k.
Tensor pca_project(const Tensor& rows, const PcaBasis& basis, int k = 2);

/// Records the named stage over every sample, fits one basis on the pooled
/// rows, and writes per-sample CSVs `sample_id,t,pc1,pc2` plus basis.bin
/// (mean and components in the checkpoint float format) into out_dir.
/// Returns the recorded matrices (projected trajectories are derivable).
std::vector<ActivationMatrix> export_trajectories(const Model& model, const Dataset& dataset,
                                                  const std::vector<int>& ids,
                                                  const std::string& stage, int delay,
                                                  int crop_margin,
                                                  const std::filesystem::path& out_dir);

/// Mean inter-class distance over mean intra-class distance of the
/// end-of-trajectory points in (pc1, pc2); > 1 means classes separate.
double separation_statistic(const std::vector<std::vector<double>>& end_points,
                            const std::vector<int>& classes);

void save_pca_basis(const PcaBasis& basis, const std::filesystem::path& path);
PcaBasis load_pca_basis(const std::filesystem::path& path);

}  // namespace mstrnn
