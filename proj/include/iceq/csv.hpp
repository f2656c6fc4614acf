#pragma once

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "iceq/core.hpp"

namespace iceq::csv {

struct ParseError : std::runtime_error {
    ParseError(const std::string& msg, int line, int column)
        : std::runtime_error(msg + " (line " + std::to_string(line) + ", column " +
                             std::to_string(column) + ")") {}
};

inline std::vector<std::vector<double>> read_table(std::istream& in,
                                                   const std::string& expected_header,
                                                   std::size_t ncols) {
    std::vector<std::vector<double>> rows;
    std::string line;
    int lineno = 0;
    if (!std::getline(in, line)) throw ParseError("empty file", 1, 1);
    ++lineno;
    if (line != expected_header)
        throw ParseError("expected header '" + expected_header + "', got '" + line + "'",
                         lineno, 1);
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::vector<double> row;
        std::stringstream ss(line);
        std::string cell;
        int col = 0;
        while (std::getline(ss, cell, ',')) {
            ++col;
            try {
                std::size_t pos = 0;
                double v = std::stod(cell, &pos);
                if (pos != cell.size()) throw std::invalid_argument("trailing chars");
                row.push_back(v);
            } catch (const std::exception&) {
                throw ParseError("bad number '" + cell + "'", lineno, col);
            }
        }
        if (row.size() != ncols)
            throw ParseError("expected " + std::to_string(ncols) + " columns", lineno, 1);
        rows.push_back(std::move(row));
    }
    return rows;
}

inline void write_step_distribution(std::ostream& out, const StepDistribution& F) {
    out << "x,mass\n";
    for (std::size_t i = 0; i < F.num_jumps(); ++i)
        out << F.jump_points()[i] << "," << F.masses()[i] << "\n";
}

inline StepDistribution read_step_distribution(std::istream& in, double support_end) {
    auto rows = read_table(in, "x,mass", 2);
    std::vector<double> x, p;
    for (auto& r : rows) {
        x.push_back(r[0]);
        p.push_back(r[1]);
    }
    return StepDistribution(x, p, support_end);
}

inline void write_grid_function(std::ostream& out, const GridFunction& f) {
    if (f.jump()) {
        out << "x,value_left,value_right\n";
        for (std::size_t i = 0; i < f.grid().size(); ++i) {
            double x = f.grid()[i];
            if (std::abs(x - f.jump()->location) <= 1e-14)
                out << x << "," << f.jump()->left << "," << f.jump()->right << "\n";
            else
                out << x << "," << f.values()[i] << "," << f.values()[i] << "\n";
        }
    } else {
        out << "x,value\n";
        for (std::size_t i = 0; i < f.grid().size(); ++i)
            out << f.grid()[i] << "," << f.values()[i] << "\n";
    }
}

inline void write_grid_function(const std::string& path, const GridFunction& f) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    out.precision(12);
    write_grid_function(out, f);
}

inline void write_step_distribution(const std::string& path, const StepDistribution& F) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open " + path);
    out.precision(12);
    write_step_distribution(out, F);
}

}  // namespace iceq::csv
