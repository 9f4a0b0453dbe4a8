"""Currency address profiles and regex-based address extraction.

A profile describes what an address of a given currency looks like:
allowed first characters, body alphabet, and total length bounds. All
address validation in the package goes through a profile, so support
for another chain is a configuration entry, not new code.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

# Base58: no 0 (zero), O, I, l.
BASE58_ALPHABET = "123456789ABCDEFGHJKLMNPQRSTUVWXYZabcdefghijkmnopqrstuvwxyz"


@dataclass(frozen=True)
class CurrencyProfile:
    name: str
    prefixes: str
    alphabet: str = BASE58_ALPHABET
    min_length: int = 26
    max_length: int = 35
    _regex: re.Pattern = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.prefixes:
            raise ValueError("profile needs at least one prefix character")
        if self.min_length < 2 or self.max_length < self.min_length:
            raise ValueError("bad length bounds")
        alpha = re.escape(self.alphabet)
        # Candidates must not touch adjacent alphabet characters, so an
        # over-long run yields no match instead of a truncated one.
        pattern = (
            f"(?<![{alpha}])"
            f"[{re.escape(self.prefixes)}]"
            f"[{alpha}]{{{self.min_length - 1},{self.max_length - 1}}}"
            f"(?![{alpha}])"
        )
        object.__setattr__(self, "_regex", re.compile(pattern))

    def is_valid(self, text: str) -> bool:
        """True if `text` is exactly one well-formed address."""
        if not self.min_length <= len(text) <= self.max_length:
            return False
        if text[0] not in self.prefixes:
            return False
        return all(c in self.alphabet for c in text[1:])

    def finditer(self, text: str):
        return self._regex.finditer(text)


BITCOIN = CurrencyProfile(name="bitcoin", prefixes="13")
LITECOIN = CurrencyProfile(name="litecoin", prefixes="LM3")

PROFILES: dict[str, CurrencyProfile] = {
    "bitcoin": BITCOIN,
    "litecoin": LITECOIN,
}


def get_profile(name: str) -> CurrencyProfile:
    try:
        return PROFILES[name]
    except KeyError:
        raise KeyError(f"unknown currency profile: {name!r}") from None


def extract_addresses(text: str, profile: CurrencyProfile = BITCOIN) -> list[str]:
    """All addresses in `text`, in document order, first occurrence kept.

    A match must be bounded by non-alphabet characters or the ends of
    the string; runs longer than the profile's maximum are skipped
    entirely rather than truncated into a false positive.
    """
    seen = set()
    out = []
    for m in profile.finditer(text):
        addr = m.group(0)
        if addr not in seen:
            seen.add(addr)
            out.append(addr)
    return out
