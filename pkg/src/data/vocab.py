"""
Character-level vocabulary with bracketed special tokens
"""

import logging
import string
from typing import Dict, Iterable, List, Sequence

from ..core.errors import DataError

logger = logging.getLogger(__name__)

PAD, BOS, EOS, SEP, SEP1, SEP2 = 0, 1, 2, 3, 4, 5
SPECIALS = ("<pad>", "<s>", "</s>", "<S>", "<S1>", "<S2>")

DEFAULT_CHARSET = string.ascii_lowercase + string.digits + " .,!?-:'"


class Vocab:
    """
    Bijective id <-> symbol table.

    Ids 0..5 are the specials; content characters follow in charset order.
    """

    def __init__(self, charset: str = DEFAULT_CHARSET, strict: bool = True):
        if len(set(charset)) != len(charset):
            raise DataError("vocabulary charset contains duplicate characters")
        if any(c in "<>" for c in charset):
            raise DataError("'<' and '>' are reserved for special tokens")
        self.charset = charset
        self.strict = strict
        self._symbols: List[str] = list(SPECIALS) + list(charset)
        self._ids: Dict[str, int] = {s: i for i, s in enumerate(self._symbols)}

    def __len__(self) -> int:
        return len(self._symbols)

    @property
    def size(self) -> int:
        return len(self._symbols)

    def id_of(self, symbol: str) -> int:
        try:
            return self._ids[symbol]
        except KeyError:
            raise DataError(f"unknown symbol {symbol!r}") from None

    def symbol(self, token_id: int) -> str:
        if not 0 <= token_id < len(self._symbols):
            raise DataError(f"token id {token_id} outside vocabulary of {len(self)}")
        return self._symbols[token_id]

    def is_special(self, token_id: int) -> bool:
        return token_id < len(SPECIALS)

    def tokenize(self, text: str) -> List[int]:
        """
        Map text to ids. Bracketed specials such as "<S>" become one id.
        Unknown characters raise DataError in strict mode and are dropped
        otherwise.
        """
        ids: List[int] = []
        i = 0
        while i < len(text):
            if text[i] == "<":
                close = text.find(">", i)
                token = text[i : close + 1] if close >= 0 else ""
                if token in self._ids:
                    ids.append(self._ids[token])
                    i = close + 1
                    continue
            ch = text[i]
            if ch in self._ids:
                ids.append(self._ids[ch])
            elif self.strict:
                raise DataError(f"unknown character {ch!r} at offset {i}")
            else:
                logger.debug(f"Dropping unknown character {ch!r}")
            i += 1
        return ids

    def detokenize(self, ids: Iterable[int], strip_specials: bool = False) -> str:
        out = []
        for token_id in ids:
            token_id = int(token_id)
            if strip_specials and self.is_special(token_id):
                continue
            out.append(self.symbol(token_id))
        return "".join(out)

    def check_ids(self, ids: Sequence[int], where: str = "") -> None:
        bad = [i for i in ids if not 0 <= int(i) < len(self)]
        if bad:
            raise DataError(f"{where}token ids outside vocabulary: {bad[:5]}")
