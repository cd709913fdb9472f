#pragma once

#include <cstdint>
#include <stdexcept>

#include "mimco/linalg.hpp"

namespace mimco {

// Fixed-capacity FIFO of key vectors used as negatives. Until the queue has
// wrapped once, only the filled prefix participates; consumers must size
// their denominators off filled(), not capacity().
template <typename S>
class KeyQueue {
 public:
  KeyQueue() = default;
  KeyQueue(Eigen::Index capacity, Eigen::Index dim) { reset(capacity, dim); }

  void reset(Eigen::Index capacity, Eigen::Index dim) {
    if (capacity <= 0 || dim <= 0)
      throw std::invalid_argument("key_queue: capacity and dim must be positive");
    storage_ = Mat<S>::Zero(capacity, dim);
    write_ = 0;
    filled_ = 0;
  }

  Eigen::Index capacity() const { return storage_.rows(); }
  Eigen::Index dim() const { return storage_.cols(); }
  Eigen::Index filled() const { return filled_; }
  Eigen::Index write_pos() const { return write_; }
  bool full() const { return filled_ == capacity(); }

  // Inserts each row of keys, overwriting the oldest entries once full.
  // Batches larger than the capacity keep only the trailing rows, matching
  // what a row-by-row insertion would leave behind.
  void enqueue_dequeue(const Mat<S>& keys) {
    if (capacity() == 0) throw std::runtime_error("key_queue: used before reset");
    if (keys.cols() != dim())
      throw std::invalid_argument("key_queue: key dim does not match queue dim");
    for (Eigen::Index i = 0; i < keys.rows(); ++i) {
      storage_.row(write_) = keys.row(i);
      write_ = (write_ + 1) % capacity();
      if (filled_ < capacity()) ++filled_;
    }
  }

  // Snapshot of the currently held keys, oldest first.
  Mat<S> negatives() const {
    Mat<S> out(filled_, dim());
    if (filled_ == 0) return out;
    if (filled_ < capacity()) {
      // not yet wrapped: rows [0, filled) are in insertion order
      out = storage_.topRows(filled_);
    } else {
      const Eigen::Index tail = capacity() - write_;
      out.topRows(tail) = storage_.bottomRows(tail);
      out.bottomRows(write_) = storage_.topRows(write_);
    }
    return out;
  }

  // Raw storage access for checkpointing; row order is the internal ring
  // layout, so write_pos and filled must be saved alongside.
  const Mat<S>& raw() const { return storage_; }
  void restore(const Mat<S>& storage, Eigen::Index write_pos, Eigen::Index filled) {
    if (storage.rows() <= 0 || storage.cols() <= 0)
      throw std::invalid_argument("key_queue: restore with empty storage");
    if (write_pos < 0 || write_pos >= storage.rows() || filled < 0 || filled > storage.rows())
      throw std::invalid_argument("key_queue: restore counters out of range");
    storage_ = storage;
    write_ = write_pos;
    filled_ = filled;
  }

 private:
  Mat<S> storage_;
  Eigen::Index write_ = 0;
  Eigen::Index filled_ = 0;
};

// Per-image mean over all token rows of a feature map's key matrix, then
// re-normalized to unit length. This is the vector the patch queue stores for
// each image: one summary key per image rather than every token key.
template <typename S>
Mat<S> mean_patch_keys(const Mat<S>& token_keys, int batch, int tokens) {
  if (batch <= 0 || tokens <= 0 || token_keys.rows() != static_cast<Eigen::Index>(batch) * tokens)
    throw std::invalid_argument("mean_patch_keys: rows must equal batch * tokens");
  Mat<S> out(batch, token_keys.cols());
  for (int b = 0; b < batch; ++b)
    out.row(b) = token_keys.middleRows(static_cast<Eigen::Index>(b) * tokens, tokens).colwise().mean();
  return normalized_rows(out);
}

}  // namespace mimco
