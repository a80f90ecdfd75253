#include "mvcbm/model/views.hpp"

#include <numeric>
#include <string>

#include "mvcbm/error.hpp"

namespace mvcbm::model {

void ViewBatch::validate() const {
  if (view_dim == 0) throw ShapeError("view batch has zero view width");
  if (static_cast<std::size_t>(values.rows()) != lengths.size()) {
    throw ShapeError("view batch has " + std::to_string(values.rows()) + " rows but " +
                     std::to_string(lengths.size()) + " lengths");
  }
  if (values.cols() % static_cast<Eigen::Index>(view_dim) != 0) {
    throw ShapeError("view batch width is not a multiple of the view width");
  }
  const auto vmax = static_cast<int>(max_views());
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (lengths[i] < 1 || lengths[i] > vmax) {
      throw ShapeError("sample " + std::to_string(i) + " has " + std::to_string(lengths[i]) + " views (allowed 1.." +
                       std::to_string(vmax) + ")");
    }
  }
  if (concepts && static_cast<std::size_t>(concepts->rows()) != lengths.size()) {
    throw ShapeError("concept rows do not match the batch");
  }
  if (labels && labels->size() != lengths.size()) throw ShapeError("label count does not match the batch");
}

PackedViews ViewBatch::pack() const {
  validate();
  PackedViews out;
  out.segments = num::Segments::from_lengths(lengths);
  const auto p = static_cast<Eigen::Index>(view_dim);
  out.rows.resize(out.segments.total(), p);
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    const auto bi = static_cast<Eigen::Index>(b);
    for (int v = 0; v < lengths[b]; ++v) {
      out.rows.row(out.segments.begin(bi) + v) = values.row(bi).segment(v * p, p);
    }
  }
  return out;
}

PackedViews pack(const MultiviewDataset& ds, std::span<const std::size_t> rows) {
  std::vector<int> lengths;
  lengths.reserve(rows.size());
  for (auto i : rows) {
    if (i >= ds.size()) throw InvalidArgument("sample index " + std::to_string(i) + " out of range");
    lengths.push_back(ds.view_count(i));
  }
  PackedViews out;
  out.segments = num::Segments::from_lengths(lengths);
  const auto p = static_cast<Eigen::Index>(ds.view_dim());
  out.rows.resize(out.segments.total(), p);
  Eigen::Index r = 0;
  for (auto i : rows) {
    for (int v = 0; v < ds.view_count(i); ++v, ++r) {
      const auto src = ds.view(i, static_cast<std::size_t>(v));
      out.rows.row(r) = Eigen::Map<const Eigen::RowVectorXf>(src.data(), p);
    }
  }
  return out;
}

PackedViews pack_all(const MultiviewDataset& ds) {
  const auto rows = all_rows(ds);
  return pack(ds, rows);
}

ViewBatch make_batch(const MultiviewDataset& ds, std::span<const std::size_t> rows) {
  ViewBatch b;
  b.view_dim = ds.view_dim();
  const auto width = static_cast<Eigen::Index>(ds.max_views() * ds.view_dim());
  b.values.resize(static_cast<Eigen::Index>(rows.size()), width);
  Eigen::Index r = 0;
  for (auto i : rows) {
    const auto src = ds.padded_views(i);
    b.values.row(r++) = Eigen::Map<const Eigen::RowVectorXf>(src.data(), width);
    b.lengths.push_back(ds.view_count(i));
  }
  b.concepts = concept_matrix(ds, rows);
  const Matrix<float> y = label_column(ds, rows);
  b.labels = std::vector<float>(y.data(), y.data() + y.size());
  return b;
}

Matrix<float> concept_matrix(const MultiviewDataset& ds, std::span<const std::size_t> rows) {
  Matrix<float> c(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(ds.concept_count()));
  Eigen::Index r = 0;
  for (auto i : rows) {
    const auto src = ds.concepts(i);
    for (std::size_t k = 0; k < src.size(); ++k) c(r, static_cast<Eigen::Index>(k)) = src[k];
    ++r;
  }
  return c;
}

Matrix<float> label_column(const MultiviewDataset& ds, std::span<const std::size_t> rows) {
  Matrix<float> y(static_cast<Eigen::Index>(rows.size()), 1);
  Eigen::Index r = 0;
  for (auto i : rows) y(r++, 0) = ds.label(i);
  return y;
}

std::vector<std::size_t> all_rows(const MultiviewDataset& ds) {
  std::vector<std::size_t> rows(ds.size());
  std::iota(rows.begin(), rows.end(), std::size_t{0});
  return rows;
}

}  // namespace mvcbm::model
