#include "mvcbm/synthgen/dataset.hpp"

#include <algorithm>
#include <string>

#include "mvcbm/error.hpp"

namespace mvcbm {

std::string_view to_string(Split split) { return split == Split::kTrain ? "train" : "test"; }

MultiviewDataset::MultiviewDataset(std::size_t max_views, std::size_t view_dim, std::size_t concept_count)
    : max_views_(max_views), view_dim_(view_dim), concept_count_(concept_count) {
  if (max_views == 0 || view_dim == 0) throw InvalidArgument("dataset needs at least one view of positive width");
}

void MultiviewDataset::add_sample(std::span<const float> views, int view_count,
                                  std::span<const std::uint8_t> concepts, std::uint8_t label, Split split) {
  if (view_count < 1 || static_cast<std::size_t>(view_count) > max_views_) {
    throw InvalidArgument("view count " + std::to_string(view_count) + " outside [1, " +
                          std::to_string(max_views_) + "]");
  }
  if (views.size() != static_cast<std::size_t>(view_count) * view_dim_) {
    throw ShapeError("sample has " + std::to_string(views.size()) + " feature values, expected " +
                     std::to_string(static_cast<std::size_t>(view_count) * view_dim_));
  }
  if (concepts.size() != concept_count_) throw ShapeError("concept vector length mismatch");
  if (label > 1) throw InvalidArgument("labels must be binary");
  for (auto c : concepts) {
    if (c > 1) throw InvalidArgument("concepts must be binary");
  }
  const std::size_t start = features_.size();
  features_.resize(start + max_views_ * view_dim_, 0.0f);
  std::copy(views.begin(), views.end(), features_.begin() + static_cast<std::ptrdiff_t>(start));
  view_counts_.push_back(view_count);
  concepts_.insert(concepts_.end(), concepts.begin(), concepts.end());
  labels_.push_back(label);
  splits_.push_back(split);
}

std::span<const float> MultiviewDataset::view(std::size_t i, std::size_t v) const {
  return std::span<const float>(features_).subspan((i * max_views_ + v) * view_dim_, view_dim_);
}

std::span<const float> MultiviewDataset::padded_views(std::size_t i) const {
  return std::span<const float>(features_).subspan(i * max_views_ * view_dim_, max_views_ * view_dim_);
}

std::span<const std::uint8_t> MultiviewDataset::concepts(std::size_t i) const {
  return std::span<const std::uint8_t>(concepts_).subspan(i * concept_count_, concept_count_);
}

std::vector<std::size_t> MultiviewDataset::indices(Split split) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < size(); ++i) {
    if (splits_[i] == split) out.push_back(i);
  }
  return out;
}

std::size_t MultiviewDataset::count(Split split) const {
  return static_cast<std::size_t>(std::count(splits_.begin(), splits_.end(), split));
}

MultiviewDataset MultiviewDataset::subset(std::span<const std::size_t> rows) const {
  MultiviewDataset out(max_views_, view_dim_, concept_count_);
  out.features_.reserve(rows.size() * max_views_ * view_dim_);
  for (std::size_t r : rows) {
    if (r >= size()) throw InvalidArgument("subset row out of range");
    const auto pv = padded_views(r);
    out.features_.insert(out.features_.end(), pv.begin(), pv.end());
    out.view_counts_.push_back(view_counts_[r]);
    const auto c = concepts(r);
    out.concepts_.insert(out.concepts_.end(), c.begin(), c.end());
    out.labels_.push_back(labels_[r]);
    out.splits_.push_back(splits_[r]);
  }
  return out;
}

MultiviewDataset MultiviewDataset::only(Split split) const {
  const auto rows = indices(split);
  return subset(rows);
}

MultiviewDataset MultiviewDataset::select_concepts(std::span<const std::size_t> cols) const {
  for (std::size_t c : cols) {
    if (c >= concept_count_) throw InvalidArgument("concept column " + std::to_string(c) + " out of range");
  }
  MultiviewDataset out = *this;
  out.concept_count_ = cols.size();
  out.concepts_.clear();
  out.concepts_.reserve(size() * cols.size());
  for (std::size_t i = 0; i < size(); ++i) {
    for (std::size_t c : cols) out.concepts_.push_back(concept_value(i, c));
  }
  return out;
}

MultiviewDataset MultiviewDataset::truncate_views(std::size_t views) const {
  if (views == 0) throw InvalidArgument("must keep at least one view");
  if (views >= max_views_) return *this;
  MultiviewDataset out(views, view_dim_, concept_count_);
  out.features_.reserve(size() * views * view_dim_);
  for (std::size_t i = 0; i < size(); ++i) {
    const auto pv = padded_views(i);
    out.features_.insert(out.features_.end(), pv.begin(), pv.begin() + static_cast<std::ptrdiff_t>(views * view_dim_));
    out.view_counts_.push_back(std::min(view_counts_[i], static_cast<int>(views)));
  }
  out.concepts_ = concepts_;
  out.labels_ = labels_;
  out.splits_ = splits_;
  return out;
}

std::vector<double> MultiviewDataset::label_vector() const { return {labels_.begin(), labels_.end()}; }

std::vector<double> MultiviewDataset::concept_column(std::size_t k) const {
  std::vector<double> out(size());
  for (std::size_t i = 0; i < size(); ++i) out[i] = concept_value(i, k);
  return out;
}

}  // namespace mvcbm
