#include "mixlora/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mixlora {

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> init) {
    rows = init.size();
    cols = rows == 0 ? 0 : init.begin()->size();
    data.reserve(rows * cols);
    for (const auto& r : init) {
        if (r.size() != cols) throw ShapeError("ragged initializer list");
        data.insert(data.end(), r.begin(), r.end());
    }
}

Vector Matrix::row(std::size_t i) const {
    Vector v(cols);
    for (std::size_t j = 0; j < cols; ++j) v[j] = at(i, j);
    return v;
}

void Matrix::set_row(std::size_t i, const Vector& v) {
    if (v.size() != cols) throw ShapeError("set_row: length mismatch");
    for (std::size_t j = 0; j < cols; ++j) at(i, j) = v[j];
}

Matrix matmul(const Matrix& lhs, const Matrix& rhs) {
    if (lhs.cols != rhs.rows) throw ShapeError("matmul: inner dimension mismatch");
    Matrix out(lhs.rows, rhs.cols);
    for (std::size_t i = 0; i < lhs.rows; ++i) {
        for (std::size_t j = 0; j < rhs.cols; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < lhs.cols; ++k) {
                acc += lhs.at(i, k) * rhs.at(k, j);
            }
            out.at(i, j) = acc;
        }
    }
    return out;
}

Matrix outer(const Vector& u, const Vector& v) {
    if (u.size() == 0 || v.size() == 0) throw ShapeError("outer: empty vector");
    Matrix out(u.size(), v.size());
    for (std::size_t i = 0; i < u.size(); ++i) {
        for (std::size_t j = 0; j < v.size(); ++j) {
            out.at(i, j) = u[i] * v[j];
        }
    }
    return out;
}

Vector softmax(const Vector& v) {
    if (v.size() == 0) throw ShapeError("softmax: empty vector");
    for (double x : v.data) {
        if (std::isnan(x)) throw NumericError("softmax: NaN input");
    }
    double m = v[0];
    for (double x : v.data) m = std::max(m, x);
    Vector out(v.size());
    double z = 0.0;
    for (std::size_t i = 0; i < v.size(); ++i) {
        out[i] = std::exp(v[i] - m);
        z += out[i];
    }
    for (std::size_t i = 0; i < v.size(); ++i) out[i] /= z;
    return out;
}

std::vector<std::size_t> top_k(const Vector& v, std::size_t k) {
    if (k < 1 || k > v.size()) throw ArgumentError("top_k: k out of range");
    std::vector<std::size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    // value descending, index ascending on ties
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return v[a] > v[b]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

Vector mean_pool(const Matrix& h) {
    if (h.rows == 0) throw ShapeError("mean_pool: empty matrix");
    Vector out(h.cols);
    for (std::size_t i = 0; i < h.rows; ++i) {
        for (std::size_t j = 0; j < h.cols; ++j) out[j] += h.at(i, j);
    }
    for (std::size_t j = 0; j < h.cols; ++j) out[j] /= static_cast<double>(h.rows);
    return out;
}

Matrix transpose(const Matrix& m) {
    Matrix out(m.cols, m.rows);
    for (std::size_t i = 0; i < m.rows; ++i) {
        for (std::size_t j = 0; j < m.cols; ++j) out.at(j, i) = m.at(i, j);
    }
    return out;
}

Vector matvec(const Matrix& m, const Vector& v) {
    if (m.cols != v.size()) throw ShapeError("matvec: dimension mismatch");
    Vector out(m.rows);
    for (std::size_t i = 0; i < m.rows; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < m.cols; ++j) acc += m.at(i, j) * v[j];
        out[i] = acc;
    }
    return out;
}

Vector vecmat(const Vector& v, const Matrix& m) {
    if (m.rows != v.size()) throw ShapeError("vecmat: dimension mismatch");
    Vector out(m.cols);
    for (std::size_t j = 0; j < m.cols; ++j) {
        double acc = 0.0;
        for (std::size_t i = 0; i < m.rows; ++i) acc += v[i] * m.at(i, j);
        out[j] = acc;
    }
    return out;
}

double dot(const Vector& a, const Vector& b) {
    if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

double norm(const Vector& v) { return std::sqrt(dot(v, v)); }

void add_scaled(Vector& dst, const Vector& src, double scale) {
    if (dst.size() != src.size()) throw ShapeError("add_scaled: length mismatch");
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
}

void add_scaled(Matrix& dst, const Matrix& src, double scale) {
    if (dst.rows != src.rows || dst.cols != src.cols) {
        throw ShapeError("add_scaled: shape mismatch");
    }
    for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += scale * src.data[i];
}

Vector as_vector(const Matrix& m) {
    Vector v(m.data.size());
    v.data = m.data;
    return v;
}

bool all_finite(const Vector& v) {
    for (double x : v.data) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

bool all_finite(const Matrix& m) {
    for (double x : m.data) {
        if (!std::isfinite(x)) return false;
    }
    return true;
}

}  // namespace mixlora
