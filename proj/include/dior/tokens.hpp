#pragma once

namespace dior::tokens {

// Reserved ids; every vocabulary starts with this block in this order.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kSep = 3;
inline constexpr int kSpeakerA = 4;
inline constexpr int kSpeakerB = 5;
inline constexpr int kUnk = 6;
inline constexpr int kReservedCount = 7;

}  // namespace dior::tokens
