#include "asr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace asr {
namespace {

std::vector<Index> element_strides(const Shape& shape) {
  std::vector<Index> s(shape.size());
  Index acc = 1;
  for (Index i = shape.size(); i-- > 0;) {
    s[i] = acc;
    acc *= shape[i];
  }
  return s;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const Index rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (Index i = 0; i < rank; ++i) {
    const Index da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const Index db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                       " are not broadcastable");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides of `from` right-aligned into `to`, zero where an axis broadcasts.
std::vector<Index> aligned_strides(const Shape& from, const Shape& to) {
  std::vector<Index> out(to.size(), 0);
  const std::vector<Index> fs = element_strides(from);
  const Index offset = to.size() - from.size();
  for (Index i = 0; i < from.size(); ++i) {
    if (from[i] == to[i + offset]) out[i + offset] = fs[i];
  }
  return out;
}

// Visits every index of `shape`, tracking linear offsets under two stride
// sets (use the same strides twice when only one input matters).
template <class F>
void for_each2(const Shape& shape, const std::vector<Index>& sa, const std::vector<Index>& sb,
               F&& fn) {
  const Index rank = shape.size();
  const Index total = numel_of(shape);
  std::vector<Index> idx(rank, 0);
  Index oa = 0, ob = 0;
  for (Index i = 0;;) {
    fn(i, oa, ob);
    if (++i == total) break;
    for (Index d = rank; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < shape[d]) break;
      oa -= sa[d] * shape[d];
      ob -= sb[d] * shape[d];
      idx[d] = 0;
    }
  }
}

struct BroadcastPlan {
  Shape out;
  std::vector<Index> sa, sb;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  BroadcastPlan p;
  p.out = broadcast_shape(a, b, op);
  p.sa = aligned_strides(a, p.out);
  p.sb = aligned_strides(b, p.out);
  return p;
}

bool should_record(const Tensor& a) { return active_graph() != nullptr && a.tracked(); }
bool should_record(const Tensor& a, const Tensor& b) {
  return active_graph() != nullptr && (a.tracked() || b.tracked());
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const double* a, const double* b, double* c, Index m, Index k, Index n) {
  for (Index i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (Index kk = 0; kk < k; ++kk) {
      const double aik = a[i * k + kk];
      const double* brow = b + kk * n;
      for (Index j = 0; j < n; ++j) crow[j] += aik * brow[j];
    }
  }
}

// dA[m,k] += dC[m,n] * B[k,n]^T
void gemm_nt(const double* dc, const double* b, double* da, Index m, Index k, Index n) {
  for (Index i = 0; i < m; ++i) {
    const double* drow = dc + i * n;
    for (Index kk = 0; kk < k; ++kk) {
      const double* brow = b + kk * n;
      double s = 0.0;
      for (Index j = 0; j < n; ++j) s += drow[j] * brow[j];
      da[i * k + kk] += s;
    }
  }
}

// dB[k,n] += A[m,k]^T * dC[m,n]
void gemm_tn(const double* a, const double* dc, double* db, Index m, Index k, Index n) {
  for (Index i = 0; i < m; ++i) {
    const double* drow = dc + i * n;
    for (Index kk = 0; kk < k; ++kk) {
      const double aik = a[i * k + kk];
      double* brow = db + kk * n;
      for (Index j = 0; j < n; ++j) brow[j] += aik * drow[j];
    }
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  const BroadcastPlan plan = plan_broadcast(a.shape(), b.shape(), "add");
  Tensor out(plan.out);
  double* o = out.mutable_data().data();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for_each2(plan.out, plan.sa, plan.sb,
            [&](Index i, Index oa, Index ob) { o[i] = pa[oa] + pb[ob]; });
  if (should_record(a, b)) {
    auto ai = a.impl();
    auto bi = b.impl();
    const bool ta = a.tracked(), tb = b.tracked();
    active_graph()->record(out.impl(), [=](const std::vector<double>& oadj,
                                           Graph::Adjoints& acc) {
      if (ta) {
        std::vector<double> da(ai->numel(), 0.0);
        for_each2(plan.out, plan.sa, plan.sb,
                  [&](Index i, Index oa, Index) { da[oa] += oadj[i]; });
        acc.accumulate(ai, da);
      }
      if (tb) {
        std::vector<double> db(bi->numel(), 0.0);
        for_each2(plan.out, plan.sa, plan.sb,
                  [&](Index i, Index, Index ob) { db[ob] += oadj[i]; });
        acc.accumulate(bi, db);
      }
    });
  }
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const BroadcastPlan plan = plan_broadcast(a.shape(), b.shape(), "sub");
  Tensor out(plan.out);
  double* o = out.mutable_data().data();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for_each2(plan.out, plan.sa, plan.sb,
            [&](Index i, Index oa, Index ob) { o[i] = pa[oa] - pb[ob]; });
  if (should_record(a, b)) {
    auto ai = a.impl();
    auto bi = b.impl();
    const bool ta = a.tracked(), tb = b.tracked();
    active_graph()->record(out.impl(), [=](const std::vector<double>& oadj,
                                           Graph::Adjoints& acc) {
      if (ta) {
        std::vector<double> da(ai->numel(), 0.0);
        for_each2(plan.out, plan.sa, plan.sb,
                  [&](Index i, Index oa, Index) { da[oa] += oadj[i]; });
        acc.accumulate(ai, da);
      }
      if (tb) {
        std::vector<double> db(bi->numel(), 0.0);
        for_each2(plan.out, plan.sa, plan.sb,
                  [&](Index i, Index, Index ob) { db[ob] -= oadj[i]; });
        acc.accumulate(bi, db);
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const BroadcastPlan plan = plan_broadcast(a.shape(), b.shape(), "mul");
  Tensor out(plan.out);
  double* o = out.mutable_data().data();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for_each2(plan.out, plan.sa, plan.sb,
            [&](Index i, Index oa, Index ob) { o[i] = pa[oa] * pb[ob]; });
  if (should_record(a, b)) {
    auto ai = a.impl();
    auto bi = b.impl();
    const bool ta = a.tracked(), tb = b.tracked();
    active_graph()->record(out.impl(), [=](const std::vector<double>& oadj,
                                           Graph::Adjoints& acc) {
      const double* va = ai->data.data();
      const double* vb = bi->data.data();
      if (ta) {
        std::vector<double> da(ai->numel(), 0.0);
        for_each2(plan.out, plan.sa, plan.sb,
                  [&](Index i, Index oa, Index ob) { da[oa] += oadj[i] * vb[ob]; });
        acc.accumulate(ai, da);
      }
      if (tb) {
        std::vector<double> db(bi->numel(), 0.0);
        for_each2(plan.out, plan.sa, plan.sb,
                  [&](Index i, Index oa, Index ob) { db[ob] += oadj[i] * va[oa]; });
        acc.accumulate(bi, db);
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& x, double c) {
  Tensor out(x.shape());
  const double* px = x.data().data();
  double* o = out.mutable_data().data();
  for (Index i = 0; i < x.numel(); ++i) o[i] = px[i] * c;
  if (should_record(x)) {
    auto xi = x.impl();
    active_graph()->record(out.impl(),
                           [=](const std::vector<double>& oadj, Graph::Adjoints& acc) {
                             std::vector<double> dx(oadj.size());
                             for (Index i = 0; i < oadj.size(); ++i) dx[i] = oadj[i] * c;
                             acc.accumulate(xi, dx);
                           });
  }
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  const double* px = x.data().data();
  double* o = out.mutable_data().data();
  for (Index i = 0; i < x.numel(); ++i) o[i] = px[i] > 0.0 ? px[i] : 0.0;
  if (should_record(x)) {
    auto xi = x.impl();
    active_graph()->record(out.impl(),
                           [=](const std::vector<double>& oadj, Graph::Adjoints& acc) {
                             const double* v = xi->data.data();
                             std::vector<double> dx(oadj.size());
                             for (Index i = 0; i < oadj.size(); ++i)
                               dx[i] = v[i] > 0.0 ? oadj[i] : 0.0;
                             acc.accumulate(xi, dx);
                           });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape target) {
  if (numel_of(target) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(target));
  }
  Tensor out(std::move(target), x.data());
  if (should_record(x)) {
    auto xi = x.impl();
    active_graph()->record(out.impl(),
                           [=](const std::vector<double>& oadj, Graph::Adjoints& acc) {
                             acc.accumulate(xi, oadj);
                           });
  }
  return out;
}

Tensor transpose_last_two(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose_last_two requires rank >= 2");
  Shape s = x.shape();
  const Index r = s[s.size() - 2], c = s[s.size() - 1];
  std::swap(s[s.size() - 2], s[s.size() - 1]);
  Tensor out(s);
  const Index batches = x.numel() / (r * c);
  const double* px = x.data().data();
  double* o = out.mutable_data().data();
  for (Index b = 0; b < batches; ++b) {
    const double* xm = px + b * r * c;
    double* om = o + b * r * c;
    for (Index i = 0; i < r; ++i)
      for (Index j = 0; j < c; ++j) om[j * r + i] = xm[i * c + j];
  }
  if (should_record(x)) {
    auto xi = x.impl();
    active_graph()->record(
        out.impl(), [=](const std::vector<double>& oadj, Graph::Adjoints& acc) {
          std::vector<double> dx(xi->numel());
          for (Index b = 0; b < batches; ++b) {
            const double* om = oadj.data() + b * r * c;
            double* xm = dx.data() + b * r * c;
            for (Index i = 0; i < r; ++i)
              for (Index j = 0; j < c; ++j) xm[i * c + j] = om[j * r + i];
          }
          acc.accumulate(xi, dx);
        });
  }
  return out;
}

Tensor concat_last_axis(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw UsageError("concat_last_axis: no inputs");
  const Shape& first = parts[0].shape();
  Index total_last = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != first.size()) throw ShapeError("concat_last_axis: rank mismatch");
    for (Index d = 0; d + 1 < first.size(); ++d) {
      if (p.shape()[d] != first[d]) {
        throw ShapeError("concat_last_axis: shapes " + shape_str(first) + " and " +
                         shape_str(p.shape()) + " differ off the last axis");
      }
    }
    total_last += p.shape().back();
  }
  Shape os = first;
  os.back() = total_last;
  Tensor out(os);
  const Index rows = out.numel() / total_last;
  double* o = out.mutable_data().data();
  Index col = 0;
  for (const Tensor& p : parts) {
    const Index w = p.shape().back();
    const double* pp = p.data().data();
    for (Index r = 0; r < rows; ++r)
      std::copy(pp + r * w, pp + (r + 1) * w, o + r * total_last + col);
    col += w;
  }
  bool any_tracked = false;
  for (const Tensor& p : parts) any_tracked = any_tracked || p.tracked();
  if (active_graph() != nullptr && any_tracked) {
    std::vector<std::shared_ptr<TensorImpl>> impls;
    std::vector<bool> tracked;
    std::vector<Index> widths;
    for (const Tensor& p : parts) {
      impls.push_back(p.impl());
      tracked.push_back(p.tracked());
      widths.push_back(p.shape().back());
    }
    active_graph()->record(
        out.impl(), [=](const std::vector<double>& oadj, Graph::Adjoints& acc) {
          Index c0 = 0;
          for (Index pi = 0; pi < impls.size(); ++pi) {
            const Index w = widths[pi];
            if (tracked[pi]) {
              std::vector<double> dp(impls[pi]->numel());
              for (Index r = 0; r < rows; ++r)
                std::copy(oadj.data() + r * total_last + c0,
                          oadj.data() + r * total_last + c0 + w, dp.data() + r * w);
              acc.accumulate(impls[pi], dp);
            }
            c0 += w;
          }
        });
  }
  return out;
}

Tensor slice_last_axis(const Tensor& x, Index start, Index len) {
  const Index last = x.shape().back();
  if (len == 0 || start + len > last) {
    throw ShapeError("slice_last_axis: window [" + std::to_string(start) + ", " +
                     std::to_string(start + len) + ") exceeds axis of " + std::to_string(last));
  }
  Shape os = x.shape();
  os.back() = len;
  Tensor out(os);
  const Index rows = x.numel() / last;
  const double* px = x.data().data();
  double* o = out.mutable_data().data();
  for (Index r = 0; r < rows; ++r)
    std::copy(px + r * last + start, px + r * last + start + len, o + r * len);
  if (should_record(x)) {
    auto xi = x.impl();
    active_graph()->record(
        out.impl(), [=](const std::vector<double>& oadj, Graph::Adjoints& acc) {
          std::vector<double> dx(xi->numel(), 0.0);
          for (Index r = 0; r < rows; ++r)
            for (Index j = 0; j < len; ++j) dx[r * last + start + j] = oadj[r * len + j];
          acc.accumulate(xi, dx);
        });
  }
  return out;
}

Tensor masked_fill(const Tensor& x, const Tensor& mask, double value) {
  const BroadcastPlan plan = plan_broadcast(x.shape(), mask.shape(), "masked_fill");
  if (plan.out != x.shape()) {
    throw ShapeError("masked_fill: mask " + shape_str(mask.shape()) +
                     " is not broadcastable to " + shape_str(x.shape()));
  }
  Tensor out(x.shape());
  const double* px = x.data().data();
  const double* pm = mask.data().data();
  double* o = out.mutable_data().data();
  for_each2(plan.out, plan.sa, plan.sb,
            [&](Index i, Index, Index ob) { o[i] = pm[ob] != 0.0 ? value : px[i]; });
  if (should_record(x)) {
    auto xi = x.impl();
    auto mi = mask.impl();
    active_graph()->record(
        out.impl(), [=](const std::vector<double>& oadj, Graph::Adjoints& acc) {
          const double* m = mi->data.data();
          std::vector<double> dx(oadj.size());
          for_each2(plan.out, plan.sa, plan.sb, [&](Index i, Index, Index ob) {
            dx[i] = m[ob] != 0.0 ? 0.0 : oadj[i];
          });
          acc.accumulate(xi, dx);
        });
  }
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul requires rank >= 2, got " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()));
  }
  const Shape& as = a.shape();
  const Shape& bs = b.shape();
  const Index m = as[as.size() - 2], k = as[as.size() - 1];
  const Index kb = bs[bs.size() - 2], n = bs[bs.size() - 1];
  if (k != kb) {
    throw ShapeError("matmul: inner extents disagree between " + shape_str(as) + " and " +
                     shape_str(bs));
  }
  const Shape lead_a(as.begin(), as.end() - 2);
  const Shape lead_b(bs.begin(), bs.end() - 2);
  const Shape lead = broadcast_shape(lead_a, lead_b, "matmul");
  Shape os = lead;
  os.push_back(m);
  os.push_back(n);

  // Strides over the leading axes, measured in elements of the full arrays.
  const std::vector<Index> fsa = element_strides(as);
  const std::vector<Index> fsb = element_strides(bs);
  std::vector<Index> sa(lead.size(), 0), sb(lead.size(), 0);
  const Index off_a = lead.size() - lead_a.size();
  for (Index i = 0; i < lead_a.size(); ++i)
    if (lead_a[i] == lead[i + off_a]) sa[i + off_a] = fsa[i];
  const Index off_b = lead.size() - lead_b.size();
  for (Index i = 0; i < lead_b.size(); ++i)
    if (lead_b[i] == lead[i + off_b]) sb[i + off_b] = fsb[i];

  Tensor out(os);
  double* o = out.mutable_data().data();
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for_each2(lead, sa, sb, [&](Index bi, Index oa, Index ob) {
    gemm_nn(pa + oa, pb + ob, o + bi * m * n, m, k, n);
  });
  if (should_record(a, b)) {
    auto ai = a.impl();
    auto bimpl = b.impl();
    const bool ta = a.tracked(), tb = b.tracked();
    active_graph()->record(
        out.impl(), [=](const std::vector<double>& oadj, Graph::Adjoints& acc) {
          const double* va = ai->data.data();
          const double* vb = bimpl->data.data();
          if (ta) {
            std::vector<double> da(ai->numel(), 0.0);
            for_each2(lead, sa, sb, [&](Index bi, Index oa, Index ob) {
              gemm_nt(oadj.data() + bi * m * n, vb + ob, da.data() + oa, m, k, n);
            });
            acc.accumulate(ai, da);
          }
          if (tb) {
            std::vector<double> db(bimpl->numel(), 0.0);
            for_each2(lead, sa, sb, [&](Index bi, Index oa, Index ob) {
              gemm_tn(va + oa, oadj.data() + bi * m * n, db.data() + ob, m, k, n);
            });
            acc.accumulate(bimpl, db);
          }
        });
  }
  return out;
}

Tensor softmax_last(const Tensor& x) {
  const Index d = x.shape().back();
  const Index rows = x.numel() / d;
  Tensor out(x.shape());
  const double* px = x.data().data();
  double* o = out.mutable_data().data();
  for (Index r = 0; r < rows; ++r) {
    const double* xr = px + r * d;
    double* orow = o + r * d;
    double mx = xr[0];
    for (Index j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (Index j = 0; j < d; ++j) {
      orow[j] = std::exp(xr[j] - mx);
      sum += orow[j];
    }
    for (Index j = 0; j < d; ++j) orow[j] /= sum;
  }
  if (should_record(x)) {
    auto xi = x.impl();
    auto oi = out.impl();
    active_graph()->record(
        out.impl(), [=](const std::vector<double>& oadj, Graph::Adjoints& acc) {
          const double* y = oi->data.data();
          std::vector<double> dx(oadj.size());
          for (Index r = 0; r < rows; ++r) {
            const double* yr = y + r * d;
            const double* gr = oadj.data() + r * d;
            double dot = 0.0;
            for (Index j = 0; j < d; ++j) dot += gr[j] * yr[j];
            for (Index j = 0; j < d; ++j) dx[r * d + j] = yr[j] * (gr[j] - dot);
          }
          acc.accumulate(xi, dx);
        });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const Index d = x.shape().back();
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw ShapeError("layer_norm: gain/bias must be [" + std::to_string(d) + "], got " +
                     shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  }
  const Index rows = x.numel() / d;
  Tensor out(x.shape());
  std::vector<double> means(rows), invs(rows);
  const double* px = x.data().data();
  const double* pg = gain.data().data();
  const double* pb = bias.data().data();
  double* o = out.mutable_data().data();
  for (Index r = 0; r < rows; ++r) {
    const double* xr = px + r * d;
    double mean = 0.0;
    for (Index j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (Index j = 0; j < d; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + eps);
    means[r] = mean;
    invs[r] = inv;
    for (Index j = 0; j < d; ++j) o[r * d + j] = (xr[j] - mean) * inv * pg[j] + pb[j];
  }
  if (should_record(x) || should_record(gain) || should_record(bias)) {
    auto xi = x.impl();
    auto gi = gain.impl();
    auto bi = bias.impl();
    const bool tx = x.tracked(), tg = gain.tracked(), tb = bias.tracked();
    active_graph()->record(
        out.impl(), [=, means = std::move(means),
                     invs = std::move(invs)](const std::vector<double>& oadj,
                                             Graph::Adjoints& acc) {
          const double* vx = xi->data.data();
          const double* vg = gi->data.data();
          std::vector<double> dx(tx ? xi->numel() : 0, 0.0);
          std::vector<double> dg(tg ? d : 0, 0.0);
          std::vector<double> db(tb ? d : 0, 0.0);
          std::vector<double> xhat(d), dxhat(d);
          for (Index r = 0; r < rows; ++r) {
            const double* xr = vx + r * d;
            const double* gr = oadj.data() + r * d;
            for (Index j = 0; j < d; ++j) xhat[j] = (xr[j] - means[r]) * invs[r];
            if (tg)
              for (Index j = 0; j < d; ++j) dg[j] += gr[j] * xhat[j];
            if (tb)
              for (Index j = 0; j < d; ++j) db[j] += gr[j];
            if (tx) {
              double m1 = 0.0, m2 = 0.0;
              for (Index j = 0; j < d; ++j) {
                dxhat[j] = gr[j] * vg[j];
                m1 += dxhat[j];
                m2 += dxhat[j] * xhat[j];
              }
              m1 /= static_cast<double>(d);
              m2 /= static_cast<double>(d);
              for (Index j = 0; j < d; ++j)
                dx[r * d + j] = invs[r] * (dxhat[j] - m1 - xhat[j] * m2);
            }
          }
          if (tx) acc.accumulate(xi, dx);
          if (tg) acc.accumulate(gi, dg);
          if (tb) acc.accumulate(bi, db);
        });
  }
  return out;
}

Tensor dropout(const Tensor& x, double p, Mode mode, RngStream& rng) {
  if (p < 0.0 || p >= 1.0) {
    throw ConfigError("dropout probability must be in [0, 1), got " + std::to_string(p));
  }
  if (mode == Mode::kEval || p == 0.0) return x;
  const double inv = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (double& m : mask) m = rng.uniform() < p ? 0.0 : inv;
  Tensor out(x.shape());
  const double* px = x.data().data();
  double* o = out.mutable_data().data();
  for (Index i = 0; i < x.numel(); ++i) o[i] = px[i] * mask[i];
  if (should_record(x)) {
    auto xi = x.impl();
    active_graph()->record(out.impl(), [=, mask = std::move(mask)](
                                           const std::vector<double>& oadj,
                                           Graph::Adjoints& acc) {
      std::vector<double> dx(oadj.size());
      for (Index i = 0; i < oadj.size(); ++i) dx[i] = oadj[i] * mask[i];
      acc.accumulate(xi, dx);
    });
  }
  return out;
}

Tensor embedding_lookup(const Tensor& table, const std::vector<int32_t>& ids,
                        const Shape& id_shape) {
  if (table.rank() != 2) throw ShapeError("embedding_lookup: table must be rank 2");
  if (numel_of(id_shape) != ids.size()) {
    throw ShapeError("embedding_lookup: id shape " + shape_str(id_shape) + " does not match " +
                     std::to_string(ids.size()) + " ids");
  }
  const Index vocab = table.shape()[0];
  const Index d = table.shape()[1];
  for (int32_t id : ids) {
    if (id < 0 || static_cast<Index>(id) >= vocab) {
      throw DataError("embedding_lookup: id " + std::to_string(id) +
                      " outside vocabulary of " + std::to_string(vocab));
    }
  }
  Shape os = id_shape;
  os.push_back(d);
  Tensor out(os);
  const double* pt = table.data().data();
  double* o = out.mutable_data().data();
  for (Index r = 0; r < ids.size(); ++r)
    std::copy(pt + static_cast<Index>(ids[r]) * d, pt + (static_cast<Index>(ids[r]) + 1) * d,
              o + r * d);
  if (should_record(table)) {
    auto ti = table.impl();
    active_graph()->record(
        out.impl(), [=](const std::vector<double>& oadj, Graph::Adjoints& acc) {
          std::vector<double> dt(ti->numel(), 0.0);
          for (Index r = 0; r < ids.size(); ++r) {
            double* drow = dt.data() + static_cast<Index>(ids[r]) * d;
            const double* grow = oadj.data() + r * d;
            for (Index j = 0; j < d; ++j) drow[j] += grow[j];
          }
          acc.accumulate(ti, dt);
        });
  }
  return out;
}

Tensor stack_frames(const Tensor& x, Index factor) {
  if (factor < 1) throw ConfigError("stack_frames: factor must be >= 1");
  if (x.rank() != 2 && x.rank() != 3) {
    throw ShapeError("stack_frames expects [T, F] or [B, T, F], got " + shape_str(x.shape()));
  }
  const bool batched = x.rank() == 3;
  const Index nb = batched ? x.shape()[0] : 1;
  const Index t = x.shape()[batched ? 1 : 0];
  const Index f = x.shape().back();
  const Index t2 = (t + factor - 1) / factor;
  Shape os = batched ? Shape{nb, t2, factor * f} : Shape{t2, factor * f};
  Tensor out(os);
  const double* px = x.data().data();
  double* o = out.mutable_data().data();
  for (Index b = 0; b < nb; ++b) {
    for (Index g = 0; g < t2; ++g) {
      for (Index c = 0; c < factor; ++c) {
        const Index src_t = g * factor + c;
        double* dst = o + (b * t2 + g) * factor * f + c * f;
        if (src_t < t) {
          const double* src = px + (b * t + src_t) * f;
          std::copy(src, src + f, dst);
        }
      }
    }
  }
  if (should_record(x)) {
    auto xi = x.impl();
    active_graph()->record(
        out.impl(), [=](const std::vector<double>& oadj, Graph::Adjoints& acc) {
          std::vector<double> dx(xi->numel(), 0.0);
          for (Index b = 0; b < nb; ++b)
            for (Index g = 0; g < t2; ++g)
              for (Index c = 0; c < factor; ++c) {
                const Index src_t = g * factor + c;
                if (src_t >= t) continue;
                const double* grow = oadj.data() + (b * t2 + g) * factor * f + c * f;
                double* drow = dx.data() + (b * t + src_t) * f;
                for (Index j = 0; j < f; ++j) drow[j] += grow[j];
              }
          acc.accumulate(xi, dx);
        });
  }
  return out;
}

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  if (should_record(x)) {
    auto xi = x.impl();
    active_graph()->record(out.impl(),
                           [=](const std::vector<double>& oadj, Graph::Adjoints& acc) {
                             acc.accumulate(xi, std::vector<double>(xi->numel(), oadj[0]));
                           });
  }
  return out;
}

Tensor mean_all(const Tensor& x) {
  const double n = static_cast<double>(x.numel());
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s / n);
  if (should_record(x)) {
    auto xi = x.impl();
    active_graph()->record(out.impl(),
                           [=](const std::vector<double>& oadj, Graph::Adjoints& acc) {
                             acc.accumulate(xi, std::vector<double>(xi->numel(), oadj[0] / n));
                           });
  }
  return out;
}

LossValue label_smoothed_loss(const Tensor& logits, const std::vector<int32_t>& targets,
                              double epsilon, int32_t pad_id, Reduction reduction) {
  if (epsilon < 0.0 || epsilon >= 1.0) {
    throw ConfigError("label smoothing epsilon must be in [0, 1), got " +
                      std::to_string(epsilon));
  }
  const Index v = logits.shape().back();
  if (v < 2) throw ShapeError("label_smoothed_loss: need at least 2 classes");
  const Index rows = logits.numel() / v;
  if (targets.size() != rows) {
    throw ShapeError("label_smoothed_loss: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(rows) + " positions");
  }
  for (int32_t t : targets) {
    if (t != pad_id && (t < 0 || static_cast<Index>(t) >= v)) {
      throw DataError("label_smoothed_loss: target id " + std::to_string(t) +
                      " outside vocabulary of " + std::to_string(v));
    }
  }
  Index non_pad = 0;
  for (int32_t t : targets) non_pad += t != pad_id ? 1 : 0;
  if (non_pad == 0) throw DataError("label_smoothed_loss: every position is padding");

  const double beta = epsilon / static_cast<double>(v - 1);
  const double* px = logits.data().data();
  double total = 0.0;
  for (Index r = 0; r < rows; ++r) {
    if (targets[r] == pad_id) continue;
    const double* xr = px + r * v;
    double mx = xr[0];
    for (Index j = 1; j < v; ++j) mx = std::max(mx, xr[j]);
    double sum = 0.0;
    for (Index j = 0; j < v; ++j) sum += std::exp(xr[j] - mx);
    const double lse = mx + std::log(sum);
    double lp_sum = 0.0;
    for (Index j = 0; j < v; ++j) lp_sum += xr[j] - lse;
    const double lp_t = xr[targets[r]] - lse;
    total -= (1.0 - epsilon) * lp_t + beta * (lp_sum - lp_t);
  }
  const bool mean = reduction == Reduction::kMean;
  Tensor out = Tensor::scalar(mean ? total / static_cast<double>(non_pad) : total);
  if (should_record(logits)) {
    auto li = logits.impl();
    active_graph()->record(
        out.impl(), [=](const std::vector<double>& oadj, Graph::Adjoints& acc) {
          const double w = oadj[0] * (mean ? 1.0 / static_cast<double>(non_pad) : 1.0);
          const double* x = li->data.data();
          std::vector<double> dx(li->numel(), 0.0);
          std::vector<double> prob(v);
          for (Index r = 0; r < rows; ++r) {
            if (targets[r] == pad_id) continue;
            const double* xr = x + r * v;
            double mx = xr[0];
            for (Index j = 1; j < v; ++j) mx = std::max(mx, xr[j]);
            double sum = 0.0;
            for (Index j = 0; j < v; ++j) {
              prob[j] = std::exp(xr[j] - mx);
              sum += prob[j];
            }
            for (Index j = 0; j < v; ++j) {
              const double q =
                  static_cast<Index>(targets[r]) == j ? 1.0 - epsilon : beta;
              dx[r * v + j] = w * (prob[j] / sum - q);
            }
          }
          acc.accumulate(li, dx);
        });
  }
  return LossValue{out, non_pad};
}

}  // namespace asr
