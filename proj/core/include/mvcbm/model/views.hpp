#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "mvcbm/numerics/ops.hpp"
#include "mvcbm/synthgen/dataset.hpp"

namespace mvcbm::model {

using num::Matrix;

// Views of a batch stacked row by row without padding: sample b owns rows
// segments.begin(b) .. segments.begin(b) + segments.length(b) - 1, in view order.
struct PackedViews {
  Matrix<float> rows;
  num::Segments segments;

  std::size_t batch_size() const { return static_cast<std::size_t>(segments.count()); }
};

// Zero-padded batch: values is B x (V_max * p), lengths holds the true view
// counts.
struct ViewBatch {
  Matrix<float> values;
  std::vector<int> lengths;
  std::size_t view_dim = 0;
  std::optional<Matrix<float>> concepts;
  std::optional<std::vector<float>> labels;

  std::size_t batch_size() const { return lengths.size(); }
  std::size_t max_views() const { return view_dim == 0 ? 0 : static_cast<std::size_t>(values.cols()) / view_dim; }

  void validate() const;
  PackedViews pack() const;
};

PackedViews pack(const MultiviewDataset& ds, std::span<const std::size_t> rows);
PackedViews pack_all(const MultiviewDataset& ds);
ViewBatch make_batch(const MultiviewDataset& ds, std::span<const std::size_t> rows);

// B x K concept matrix and length-B label column for the given rows.
Matrix<float> concept_matrix(const MultiviewDataset& ds, std::span<const std::size_t> rows);
Matrix<float> label_column(const MultiviewDataset& ds, std::span<const std::size_t> rows);

std::vector<std::size_t> all_rows(const MultiviewDataset& ds);

}  // namespace mvcbm::model
