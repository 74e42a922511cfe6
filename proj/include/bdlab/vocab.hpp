#pragma once

#include <cstdint>
#include <vector>

namespace bdlab {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

// Reserved ids. Task symbols start at kFirstSymbol.
namespace tok {
inline constexpr Token PAD = 0;
inline constexpr Token BOS = 1;
inline constexpr Token EOS = 2;
inline constexpr Token SEP = 3;
inline constexpr Token T1 = 4;  // trigger ids T1..T8 are 4..11
inline constexpr int kNumTriggers = 8;
inline constexpr Token NEG = 12;
inline constexpr Token REFUSE = 13;
inline constexpr Token PAYLOAD = 14;
inline constexpr Token kFirstSymbol = 15;

constexpr Token trigger(int i) { return T1 + (i - 1); }  // trigger(1) == T1
constexpr bool is_trigger(Token t) { return t >= T1 && t < T1 + kNumTriggers; }
}  // namespace tok

inline constexpr int kNumReservedTokens = tok::kFirstSymbol;

}  // namespace bdlab
