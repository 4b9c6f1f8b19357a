#pragma once

#include <cstddef>
#include <vector>

#include "mixlora/errors.hpp"

namespace mixlora {

// Dense double-precision primitives. All operations are pure and use a fixed
// row-major accumulation order, so results are bit-reproducible across runs.

struct Vector {
    std::vector<double> data;

    Vector() = default;
    explicit Vector(std::size_t n, double fill = 0.0) : data(n, fill) {}
    Vector(std::initializer_list<double> init) : data(init) {}

    std::size_t size() const { return data.size(); }
    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    bool operator==(const Vector&) const = default;
};

struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // row-major, rows*cols entries

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}
    Matrix(std::initializer_list<std::initializer_list<double>> init);

    double& at(std::size_t i, std::size_t j) { return data[i * cols + j]; }
    double at(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

    Vector row(std::size_t i) const;
    void set_row(std::size_t i, const Vector& v);

    bool operator==(const Matrix&) const = default;
};

Matrix matmul(const Matrix& lhs, const Matrix& rhs);
Matrix outer(const Vector& u, const Vector& v);
Vector softmax(const Vector& v);
// Indices of the k largest entries, ties broken toward the lowest index,
// returned sorted ascending.
std::vector<std::size_t> top_k(const Vector& v, std::size_t k);
Vector mean_pool(const Matrix& h);

Matrix transpose(const Matrix& m);
Vector matvec(const Matrix& m, const Vector& v);
// row-vector times matrix: result[j] = sum_i v[i]*m[i][j]
Vector vecmat(const Vector& v, const Matrix& m);
double dot(const Vector& a, const Vector& b);
double norm(const Vector& v);

void add_scaled(Vector& dst, const Vector& src, double scale);
void add_scaled(Matrix& dst, const Matrix& src, double scale);
Vector as_vector(const Matrix& m);  // flatten row-major

bool all_finite(const Vector& v);
bool all_finite(const Matrix& m);

}  // namespace mixlora
