#include "mstrnn/analysis.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <numeric>

#include "mstrnn/errors.hpp"
#include "mstrnn/training.hpp"

namespace mstrnn {

namespace {

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Deterministic,
/// and plenty fast for the few-hundred-column matrices recorded here.
void jacobi_eigen(Tensor a /*D x D, destroyed*/, std::vector<double>& eigenvalues,
                  Tensor& eigenvectors) {
    const int n = a.dim(0);
    eigenvectors = Tensor({n, n});
    for (int i = 0; i < n; ++i) eigenvectors(i, i) = 1.0;

    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0.0;
        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) off += a(p, q) * a(p, q);
        if (off < 1e-24) break;

        for (int p = 0; p < n; ++p)
            for (int q = p + 1; q < n; ++q) {
                const double apq = a(p, q);
                if (std::abs(apq) < 1e-300) continue;
                const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0 ? 1.0 : -1.0) /
                                 (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                const double c = 1.0 / std::sqrt(t * t + 1.0);
                const double s = t * c;

                for (int k = 0; k < n; ++k) {
                    const double akp = a(k, p), akq = a(k, q);
                    a(k, p) = c * akp - s * akq;
                    a(k, q) = s * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    const double apk = a(p, k), aqk = a(q, k);
                    a(p, k) = c * apk - s * aqk;
                    a(q, k) = s * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    const double vkp = eigenvectors(k, p), vkq = eigenvectors(k, q);
                    eigenvectors(k, p) = c * vkp - s * vkq;
                    eigenvectors(k, q) = s * vkp + c * vkq;
                }
            }
    }

    eigenvalues.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) eigenvalues[static_cast<size_t>(i)] = a(i, i);
}

}  // namespace

PcaBasis pca_fit(const Tensor& rows) {
    if (rows.rank() != 2) throw ShapeError("pca_fit: expected an n x D matrix");
    const int n = rows.dim(0), d = rows.dim(1);
    if (n < 2) throw ShapeError("pca_fit: need at least 2 rows");

    PcaBasis basis;
    basis.mean.assign(static_cast<size_t>(d), 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) basis.mean[static_cast<size_t>(j)] += rows(i, j);
    for (double& m : basis.mean) m /= n;

    // Sample covariance (1/(n-1)); eigenvalues then match projection variances.
    Tensor cov({d, d});
    for (int i = 0; i < n; ++i)
        for (int a = 0; a < d; ++a) {
            const double va = rows(i, a) - basis.mean[static_cast<size_t>(a)];
            for (int b = a; b < d; ++b)
                cov(a, b) += va * (rows(i, b) - basis.mean[static_cast<size_t>(b)]);
        }
    for (int a = 0; a < d; ++a)
        for (int b = a; b < d; ++b) {
            cov(a, b) /= (n - 1);
            cov(b, a) = cov(a, b);
        }

    std::vector<double> eig;
    Tensor vec;
    jacobi_eigen(cov, eig, vec);

    // Sort descending, clamp round-off negatives, fix signs.
    std::vector<int> order(static_cast<size_t>(d));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return eig[static_cast<size_t>(a)] > eig[static_cast<size_t>(b)]; });

    basis.components = Tensor({d, d});
    basis.eigenvalues.resize(static_cast<size_t>(d));
    for (int k = 0; k < d; ++k) {
        const int src = order[static_cast<size_t>(k)];
        basis.eigenvalues[static_cast<size_t>(k)] = std::max(0.0, eig[static_cast<size_t>(src)]);
        int top = 0;
        for (int j = 1; j < d; ++j)
            if (std::abs(vec(j, src)) > std::abs(vec(top, src))) top = j;
        const double sign = vec(top, src) < 0.0 ? -1.0 : 1.0;
        for (int j = 0; j < d; ++j) basis.components(j, k) = sign * vec(j, src);
    }
    return basis;
}

Tensor pca_project(const Tensor& rows, const PcaBasis& basis, int k) {
    if (rows.rank() != 2 || rows.dim(1) != static_cast<int>(basis.mean.size()))
        throw ShapeError("pca_project: column count does not match the basis");
    if (k > basis.components.dim(1))
        throw ShapeError("pca_project: requested " + std::to_string(k) + " components, basis has " +
                         std::to_string(basis.components.dim(1)));
    const int n = rows.dim(0), d = rows.dim(1);
    Tensor out({n, k});
    for (int i = 0; i < n; ++i)
        for (int c = 0; c < k; ++c) {
            double acc = 0.0;
            for (int j = 0; j < d; ++j)
                acc += (rows(i, j) - basis.mean[static_cast<size_t>(j)]) * basis.components(j, c);
            out(i, c) = acc;
        }
    return out;
}

std::vector<ActivationMatrix> export_trajectories(const Model& model, const Dataset& dataset,
                                                  const std::vector<int>& ids,
                                                  const std::string& stage, int delay,
                                                  int crop_margin,
                                                  const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);

    std::vector<ActivationMatrix> records;
    for (int id : ids) {
        const VideoSample& s = dataset.samples[static_cast<size_t>(id)];
        const auto frames = center_crop(s.frames, crop_margin);
        ForwardOptions opts;
        opts.record = stage;
        const ForwardTrace trace = model.forward_sequence(frames, delay, opts);

        ActivationMatrix mat;
        mat.sample_dir = s.dir;
        for (const HeadSpec& h : model.spec().heads) mat.labels.push_back(s.labels.at(h.name));
        const int steps = trace.steps();
        const int d = static_cast<int>(trace.recorded.front().size());
        mat.rows = Tensor({steps, d});
        for (int t = 0; t < steps; ++t)
            for (int j = 0; j < d; ++j) mat.rows(t, j) = trace.recorded[static_cast<size_t>(t)][static_cast<size_t>(j)];
        records.push_back(std::move(mat));
    }

    // One basis over the pooled test-set activations.
    const int d = records.front().rows.dim(1);
    int total = 0;
    for (const auto& r : records) total += r.rows.dim(0);
    Tensor pooled({total, d});
    int row = 0;
    for (const auto& r : records)
        for (int t = 0; t < r.rows.dim(0); ++t, ++row)
            for (int j = 0; j < d; ++j) pooled(row, j) = r.rows(t, j);
    const PcaBasis basis = pca_fit(pooled);
    save_pca_basis(basis, out_dir / "basis.bin");

    for (const auto& r : records) {
        const Tensor proj = pca_project(r.rows, basis, 2);
        std::ofstream out(out_dir / (r.sample_dir + ".csv"));
        if (!out) throw IoError("cannot write trajectory CSV for " + r.sample_dir);
        out << "sample_id,t,pc1,pc2\n";
        out.precision(17);
        for (int t = 0; t < proj.dim(0); ++t)
            out << r.sample_dir << "," << t << "," << proj(t, 0) << "," << proj(t, 1) << "\n";
    }
    return records;
}

double separation_statistic(const std::vector<std::vector<double>>& end_points,
                            const std::vector<int>& classes) {
    double intra = 0.0, inter = 0.0;
    int n_intra = 0, n_inter = 0;
    for (size_t i = 0; i < end_points.size(); ++i)
        for (size_t j = i + 1; j < end_points.size(); ++j) {
            double sq = 0.0;
            for (size_t k = 0; k < end_points[i].size(); ++k) {
                const double diff = end_points[i][k] - end_points[j][k];
                sq += diff * diff;
            }
            const double dist = std::sqrt(sq);
            if (classes[i] == classes[j]) {
                intra += dist;
                ++n_intra;
            } else {
                inter += dist;
                ++n_inter;
            }
        }
    if (n_intra == 0 || n_inter == 0) return 0.0;
    return (inter / n_inter) / (intra / n_intra);
}

// ---------------------------------------------------------------------------
// Basis file: "MSTP", u32 D, then mean (D doubles) and components (D*D,
// row-major) as little-endian 64-bit floats, eigenvalues last.

namespace {

void write_u32_le(std::ostream& out, uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 4);
}

void write_f64_le(std::ostream& out, double v) {
    const uint64_t u = std::bit_cast<uint64_t>(v);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(u >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

uint32_t read_u32_le(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
}

double read_f64_le(std::istream& in) {
    unsigned char b[8];
    in.read(reinterpret_cast<char*>(b), 8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return std::bit_cast<double>(v);
}

}  // namespace

void save_pca_basis(const PcaBasis& basis, const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write basis: " + path.string());
    out.write("MSTP", 4);
    const uint32_t d = static_cast<uint32_t>(basis.mean.size());
    write_u32_le(out, d);
    for (double v : basis.mean) write_f64_le(out, v);
    for (int64_t i = 0; i < basis.components.size(); ++i) write_f64_le(out, basis.components[i]);
    for (double v : basis.eigenvalues) write_f64_le(out, v);
    if (!out) throw IoError("short write to basis: " + path.string());
}

PcaBasis load_pca_basis(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("missing basis file: " + path.string());
    char magic[4];
    in.read(magic, 4);
    if (!in || std::string(magic, 4) != "MSTP") throw IoError("bad basis magic: " + path.string());
    const int d = static_cast<int>(read_u32_le(in));
    PcaBasis basis;
    basis.mean.resize(static_cast<size_t>(d));
    for (double& v : basis.mean) v = read_f64_le(in);
    basis.components = Tensor({d, d});
    for (int64_t i = 0; i < basis.components.size(); ++i) basis.components[i] = read_f64_le(in);
    basis.eigenvalues.resize(static_cast<size_t>(d));
    for (double& v : basis.eigenvalues) v = read_f64_le(in);
    if (!in) throw IoError("truncated basis file: " + path.string());
    return basis;
}

}  // namespace mstrnn
