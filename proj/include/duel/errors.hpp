#pragma once

#include <stdexcept>
#include <string>

namespace duel {

/// Error conditions named by the library's contracts.
enum class Errc {
  RevealUnmasked,
  InvalidToken,
  EmptyCorpus,
  LengthMismatch,
  NonUniformLength,
  EnumerationCap,
  BlockMismatch,
  IllDefined,
  NoMaskedPositions,
  BadRuleSpec,
  BadModel,
  BadVocabulary,
  BadConfig,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::RevealUnmasked:    return "RevealUnmasked";
    case Errc::InvalidToken:      return "InvalidToken";
    case Errc::EmptyCorpus:       return "EmptyCorpus";
    case Errc::LengthMismatch:    return "LengthMismatch";
    case Errc::NonUniformLength:  return "NonUniformLength";
    case Errc::EnumerationCap:    return "EnumerationCap";
    case Errc::BlockMismatch:     return "BlockMismatch";
    case Errc::IllDefined:        return "IllDefined";
    case Errc::NoMaskedPositions: return "NoMaskedPositions";
    case Errc::BadRuleSpec:       return "BadRuleSpec";
    case Errc::BadModel:          return "BadModel";
    case Errc::BadVocabulary:     return "BadVocabulary";
    case Errc::BadConfig:         return "BadConfig";
  }
  return "Unknown";
}

class DuelError : public std::runtime_error {
 public:
  DuelError(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) {
  throw DuelError(code, what);
}

}  // namespace duel
