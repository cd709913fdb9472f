#include <cmath>
#include <deque>
#include <stdexcept>
#include <vector>

#include <gtest/gtest.h>

#include "mimco/key_queue.hpp"
#include "mimco/linalg.hpp"
#include "mimco/rng.hpp"

using mimco::KeyQueue;
using mimco::Mat;
using mimco::Rng;
using mimco::Vec;

namespace {

Mat<double> random_keys(Eigen::Index rows, Eigen::Index dim, Rng& rng) {
  Mat<double> m(rows, dim);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < dim; ++j) m(i, j) = rng.normal();
  return m;
}

// The independent model: a bounded deque of rows, newest at the back.
struct DequeModel {
  std::size_t capacity;
  std::deque<Vec<double>> rows;

  void push(const Mat<double>& keys) {
    for (Eigen::Index i = 0; i < keys.rows(); ++i) {
      rows.push_back(keys.row(i).transpose());
      if (rows.size() > capacity) rows.pop_front();
    }
  }
};

}  // namespace

TEST(KeyQueue, StartsEmptyAndZeroed) {
  KeyQueue<double> q(8, 3);
  EXPECT_EQ(q.capacity(), 8);
  EXPECT_EQ(q.dim(), 3);
  EXPECT_EQ(q.filled(), 0);
  EXPECT_FALSE(q.full());
  EXPECT_EQ(q.negatives().rows(), 0);
  EXPECT_DOUBLE_EQ(q.raw().cwiseAbs().maxCoeff(), 0.0);
}

TEST(KeyQueue, RejectsBadSetupAndKeys) {
  EXPECT_THROW(KeyQueue<double>(0, 3), std::invalid_argument);
  EXPECT_THROW(KeyQueue<double>(4, 0), std::invalid_argument);
  KeyQueue<double> q(4, 3);
  Mat<double> wrong(2, 5);
  EXPECT_THROW(q.enqueue_dequeue(wrong), std::invalid_argument);
  KeyQueue<double> unready;
  Mat<double> keys = Mat<double>::Ones(1, 3);
  EXPECT_THROW(unready.enqueue_dequeue(keys), std::runtime_error);
}

TEST(KeyQueue, NegativesAreOldestFirstBeforeAndAfterWrap) {
  KeyQueue<double> q(4, 1);
  Mat<double> k(1, 1);
  for (int i = 1; i <= 3; ++i) {
    k(0, 0) = i;
    q.enqueue_dequeue(k);
  }
  Mat<double> negs = q.negatives();
  ASSERT_EQ(negs.rows(), 3);
  EXPECT_DOUBLE_EQ(negs(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(negs(2, 0), 3.0);

  for (int i = 4; i <= 6; ++i) {  // pushes 1 and 2 out
    k(0, 0) = i;
    q.enqueue_dequeue(k);
  }
  negs = q.negatives();
  ASSERT_EQ(negs.rows(), 4);
  EXPECT_TRUE(q.full());
  for (int i = 0; i < 4; ++i) EXPECT_DOUBLE_EQ(negs(i, 0), 3.0 + i);
}

TEST(KeyQueue, MatchesDequeModelOverManyMixedBatches) {
  const Eigen::Index capacity = 37;  // deliberately not a batch multiple
  const Eigen::Index dim = 5;
  KeyQueue<double> q(capacity, dim);
  DequeModel model{static_cast<std::size_t>(capacity), {}};
  Rng rng(99);
  int ops = 0;
  while (ops < 2000) {
    const Eigen::Index rows = 1 + static_cast<Eigen::Index>(rng.uniform_int(9));
    Mat<double> keys = random_keys(rows, dim, rng);
    q.enqueue_dequeue(keys);
    model.push(keys);
    ops += static_cast<int>(rows);

    Mat<double> negs = q.negatives();
    ASSERT_EQ(static_cast<std::size_t>(negs.rows()), model.rows.size());
    for (Eigen::Index i = 0; i < negs.rows(); ++i)
      ASSERT_TRUE(negs.row(i).transpose() == model.rows[static_cast<std::size_t>(i)])
          << "row " << i << " after " << ops << " ops";
  }
  EXPECT_TRUE(q.full());
}

TEST(KeyQueue, OversizedBatchKeepsTrailingRows) {
  KeyQueue<double> q(3, 1);
  Mat<double> keys(7, 1);
  for (int i = 0; i < 7; ++i) keys(i, 0) = i;
  q.enqueue_dequeue(keys);
  Mat<double> negs = q.negatives();
  ASSERT_EQ(negs.rows(), 3);
  EXPECT_DOUBLE_EQ(negs(0, 0), 4.0);
  EXPECT_DOUBLE_EQ(negs(1, 0), 5.0);
  EXPECT_DOUBLE_EQ(negs(2, 0), 6.0);
}

TEST(KeyQueue, RestoreRoundTripsExactly) {
  KeyQueue<double> q(5, 2);
  Rng rng(7);
  q.enqueue_dequeue(random_keys(8, 2, rng));  // wrapped state
  KeyQueue<double> r(5, 2);
  r.restore(q.raw(), q.write_pos(), q.filled());
  EXPECT_EQ(r.negatives(), q.negatives());
  EXPECT_EQ(r.write_pos(), q.write_pos());
  EXPECT_EQ(r.filled(), q.filled());
  // And both continue identically.
  Mat<double> more = random_keys(3, 2, rng);
  q.enqueue_dequeue(more);
  r.enqueue_dequeue(more);
  EXPECT_EQ(r.negatives(), q.negatives());
}

TEST(KeyQueue, RestoreValidatesCounters) {
  KeyQueue<double> q(4, 2);
  Mat<double> storage = Mat<double>::Zero(4, 2);
  EXPECT_THROW(q.restore(storage, 4, 0), std::invalid_argument);   // write out of range
  EXPECT_THROW(q.restore(storage, 0, 5), std::invalid_argument);   // filled too large
  EXPECT_THROW(q.restore(storage, -1, 0), std::invalid_argument);  // negative
  EXPECT_NO_THROW(q.restore(storage, 0, 4));
}

TEST(MeanPatchKeys, HandComputedCase) {
  // Two images, two tokens each, dim 2. Means are (2, 0) and (0, 3); after
  // normalization the queue entry is the unit vector along each axis.
  Mat<double> token_keys(4, 2);
  token_keys << 1, 0,
                3, 0,
                0, 2,
                0, 4;
  Mat<double> out = mimco::mean_patch_keys(token_keys, 2, 2);
  ASSERT_EQ(out.rows(), 2);
  EXPECT_DOUBLE_EQ(out(0, 0), 1.0);
  EXPECT_DOUBLE_EQ(out(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(out(1, 0), 0.0);
  EXPECT_DOUBLE_EQ(out(1, 1), 1.0);
}

TEST(MeanPatchKeys, MeansRunOverAllTokensAndRowsAreUnit) {
  Rng rng(13);
  const int batch = 3, tokens = 4, dim = 6;
  Mat<double> keys = random_keys(batch * tokens, dim, rng);
  Mat<double> out = mimco::mean_patch_keys(keys, batch, tokens);
  for (int b = 0; b < batch; ++b) {
    Vec<double> mean = Vec<double>::Zero(dim);
    for (int t = 0; t < tokens; ++t) mean += keys.row(b * tokens + t).transpose();
    mean /= tokens;
    mean /= mean.norm();
    for (int j = 0; j < dim; ++j) ASSERT_NEAR(out(b, j), mean(j), 1e-12);
    ASSERT_NEAR(out.row(b).norm(), 1.0, 1e-12);
  }
}

TEST(MeanPatchKeys, RejectsShapeMismatch) {
  Mat<double> keys = Mat<double>::Ones(6, 2);
  EXPECT_THROW(mimco::mean_patch_keys(keys, 2, 2), std::invalid_argument);
  EXPECT_THROW(mimco::mean_patch_keys(keys, 0, 3), std::invalid_argument);
}
