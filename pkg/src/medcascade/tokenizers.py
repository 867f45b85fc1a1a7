"""Tokenizers for the numpy encoders.

Two implementations share one contract: ``encode(text)`` returns content
token ids (no [CLS]/padding, the encoder adds those), and the literal
separator ``[AUX]`` always maps to a single reserved id.

- HashWordTokenizer: stateless whitespace tokenizer that hashes words into a
  fixed-size id space. Used by the toy encoder; needs no vocabulary file.
- WordPieceTokenizer: greedy longest-match subword tokenizer over a
  ``vocab.txt``, for encoders loaded from pretrained BERT-style weights.
"""

from __future__ import annotations

import unicodedata
import zlib

AUX_TOKEN = "[AUX]"


def _nfc(text: str) -> str:
    return unicodedata.normalize("NFC", text)


class HashWordTokenizer:
    """Hash whitespace-separated words into ``vocab_size`` buckets.

    Ids 0..3 are reserved: [PAD]=0, [UNK]=1, [CLS]=2, [AUX]=3.  The hash is
    crc32, so ids are stable across processes and runs.
    """

    pad_id = 0
    unk_id = 1
    cls_id = 2
    aux_id = 3
    n_reserved = 4

    def __init__(self, vocab_size: int = 512, lowercase: bool = True):
        if vocab_size <= self.n_reserved:
            raise ValueError(f"vocab_size must exceed {self.n_reserved}")
        self.vocab_size = vocab_size
        self.lowercase = lowercase

    def _word_id(self, word: str) -> int:
        if self.lowercase:
            word = word.lower()
        bucket = zlib.crc32(word.encode("utf-8")) % (self.vocab_size - self.n_reserved)
        return self.n_reserved + bucket

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for segment_i, segment in enumerate(_nfc(text).split(AUX_TOKEN)):
            if segment_i > 0:
                ids.append(self.aux_id)
            ids.extend(self._word_id(w) for w in segment.split())
        return ids


class WordPieceTokenizer:
    """Greedy longest-match-first WordPiece over a BERT-style vocab.txt."""

    def __init__(self, vocab: dict[str, int], do_lower_case: bool = False,
                 max_chars_per_word: int = 100):
        self.vocab = vocab
        self.do_lower_case = do_lower_case
        self.max_chars_per_word = max_chars_per_word
        self.pad_id = vocab["[PAD]"]
        self.unk_id = vocab["[UNK]"]
        self.cls_id = vocab["[CLS]"]
        self.sep_id = vocab.get("[SEP]", self.unk_id)
        # [AUX] is not in pretrained vocabs; claim the conventional spare slot.
        if AUX_TOKEN in vocab:
            self.aux_id = vocab[AUX_TOKEN]
        elif "[unused0]" in vocab:
            self.aux_id = vocab["[unused0]"]
        else:
            self.aux_id = self.sep_id

    @classmethod
    def from_vocab_file(cls, path, **kwargs) -> "WordPieceTokenizer":
        vocab: dict[str, int] = {}
        with open(path, encoding="utf-8") as fh:
            for i, line in enumerate(fh):
                vocab[line.rstrip("\n")] = i
        return cls(vocab, **kwargs)

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @staticmethod
    def _is_punct(ch: str) -> bool:
        cp = ord(ch)
        if (33 <= cp <= 47) or (58 <= cp <= 64) or (91 <= cp <= 96) or (123 <= cp <= 126):
            return True
        return unicodedata.category(ch).startswith("P")

    def _basic_tokens(self, text: str) -> list[str]:
        text = _nfc(text)
        if self.do_lower_case:
            text = text.lower()
        out: list[str] = []
        word = []
        for ch in text:
            if ch.isspace():
                if word:
                    out.append("".join(word))
                    word = []
            elif self._is_punct(ch):
                if word:
                    out.append("".join(word))
                    word = []
                out.append(ch)
            else:
                word.append(ch)
        if word:
            out.append("".join(word))
        return out

    def _wordpiece(self, word: str) -> list[int]:
        if len(word) > self.max_chars_per_word:
            return [self.unk_id]
        ids: list[int] = []
        start = 0
        while start < len(word):
            end = len(word)
            piece_id = None
            while start < end:
                piece = word[start:end]
                if start > 0:
                    piece = "##" + piece
                if piece in self.vocab:
                    piece_id = self.vocab[piece]
                    break
                end -= 1
            if piece_id is None:
                return [self.unk_id]
            ids.append(piece_id)
            start = end
        return ids

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for segment_i, segment in enumerate(text.split(AUX_TOKEN)):
            if segment_i > 0:
                ids.append(self.aux_id)
            for word in self._basic_tokens(segment):
                ids.extend(self._wordpiece(word))
        return ids
