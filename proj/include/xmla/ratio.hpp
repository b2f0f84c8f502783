#pragma once

#include <cstdint>
#include <numeric>
#include <string>

#include "xmla/errors.hpp"

namespace xmla {

// Exact nonnegative rational for cache-size accounting. Percentages are
// rendered by integer arithmetic so reports never pick up floating drift.
struct Ratio {
    int64_t num = 0;
    int64_t den = 1;

    Ratio() = default;
    Ratio(int64_t n, int64_t d) : num(n), den(d) {
        if (d <= 0) throw DataError("Ratio: denominator must be positive");
        int64_t g = std::gcd(num, den);
        if (g > 1) {
            num /= g;
            den /= g;
        }
    }

    double value() const { return static_cast<double>(num) / static_cast<double>(den); }

    bool operator==(const Ratio& o) const { return num == o.num && den == o.den; }

    // Percentage with `decimals` digits, rounded half-up: 544/1024 -> "53.1250".
    std::string percent_string(int decimals = 4) const {
        __int128 scale = 100;
        for (int i = 0; i < decimals; ++i) scale *= 10;
        __int128 scaled = (static_cast<__int128>(num) * scale * 2 + den) / (2 * static_cast<__int128>(den));
        __int128 pow10 = 1;
        for (int i = 0; i < decimals; ++i) pow10 *= 10;
        std::string frac = std::to_string(static_cast<long long>(scaled % pow10));
        frac.insert(frac.begin(), static_cast<size_t>(decimals) - frac.size(), '0');
        std::string whole = std::to_string(static_cast<long long>(scaled / pow10));
        return decimals > 0 ? whole + "." + frac : whole;
    }
};

}  // namespace xmla
