// Student-t quantiles computed with mpmath at 40 significant digits.
#pragma once

#include <array>

namespace ranwatch::testing {

struct TQuantileRef {
  double p;
  double df;
  double t;
};

inline constexpr std::array<double, 10> kTProbs = {0.6, 0.75, 0.9, 0.95, 0.975, 0.99, 0.995, 0.999, 0.9995, 0.9999};
inline constexpr std::array<double, 5> kTDfs = {1.0, 2.0, 5.0, 30.0, 300.0};

// Row-major over (df, p).
inline constexpr std::array<double, 50> kTValues = {
    // df = 1
    0.32491969623290632616, 1.0, 3.0776835371752534026, 6.313751514675043099, 12.706204736174704646,
    31.820515953773958039, 63.656741162871580995, 318.30883898555044592, 636.61924876871961621,
    3183.0987571181509067,
    // df = 2
    0.28867513459481288225, 0.81649658092772603273, 1.8856180831641267317, 2.919985580353725687,
    4.3026527297494638523, 6.9645567342832741871, 9.9248432009182931147, 22.327124770119875435,
    31.599054576443620733, 70.700071074964277578,
    // df = 5
    0.26718086570414512673, 0.72668684380042265302, 1.4758840488244810785, 2.0150483733330242378,
    2.5705818356363155147, 3.3649299989072185928, 4.0321429835552280784, 5.8934295313560101276,
    6.8688266258811102474, 9.6775663008825913006,
    // df = 30
    0.25560536495191277249, 0.68275569332129255301, 1.3104150253913955782, 1.6972608865939578486,
    2.04227245630123831, 2.4572615424005913725, 2.7499956535672253324, 3.3851848668293051234,
    3.6459586350420218161, 4.2339859572720211158,
    // df = 300
    0.25357189491958288497, 0.6753084163073658209, 1.2843798675790130669, 1.6499486739376340497,
    1.9679030112610870301, 2.3388419237869928298, 2.5923164108477924982, 3.1176195538115234062,
    3.3232515129741876554, 3.7654932071859858295,
};

inline std::array<TQuantileRef, 50> t_quantile_table() {
  std::array<TQuantileRef, 50> out{};
  for (std::size_t d = 0; d < kTDfs.size(); ++d) {
    for (std::size_t p = 0; p < kTProbs.size(); ++p) {
      out[d * kTProbs.size() + p] = {kTProbs[p], kTDfs[d], kTValues[d * kTProbs.size() + p]};
    }
  }
  return out;
}

}  // namespace ranwatch::testing
