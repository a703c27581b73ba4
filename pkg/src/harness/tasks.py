"""
Synthetic sequence-to-sequence tasks.

- copy: y = x
- reverse: y = reversed(x)
- toy_translation: each source token is substituted through a seeded
  permutation into the target range, then adjacent pairs at even indices are
  swapped. Both steps are bijective, so every source has one reference.
- one_to_many: a language tag is prepended to the source; the tagged language's
  own substitution map produces the target.
- many_to_one: the source is written in one of L languages, the target in the
  shared hub language.

Every corpus is a pure function of its TaskSpec.
"""

import json
import logging
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Set, Tuple

from src.config import TaskKind, TaskSpec
from src.entities import RESERVED_TOKENS, Example, Vocabulary
from src.errors import ConfigError, EmptyCorpusError
from src.harness.corpus import CHECKSUM_FILE, SPLITS, VOCAB_FILE, directory_checksums, split_path, write_jsonl
from src.utils import derive_seed

logger = logging.getLogger(__name__)

HUB = "hub"
_MAP_STREAM = 1000
_MAX_ATTEMPTS_FACTOR = 50


def language_name(index: int) -> str:
    return f"l{index}"


def build_vocabulary(spec: TaskSpec) -> Vocabulary:
    """
    Reserved tokens, then one block of ``vocab_size`` symbols per language, then tags.

    Single-language tasks (copy, reverse) use only the hub block; toy_translation
    adds one target language.
    """
    tokens = list(RESERVED_TOKENS)
    languages: Dict[str, Tuple[int, int]] = {}

    def block(name: str) -> None:
        lo = len(tokens)
        tokens.extend(f"{name}_{i}" for i in range(spec.vocab_size))
        languages[name] = (lo, len(tokens))

    block(HUB)
    if spec.kind is TaskKind.TOY_TRANSLATION:
        block(language_name(0))
    elif spec.is_multilingual:
        for lang in range(spec.languages):
            block(language_name(lang))
    tags: Dict[int, int] = {}
    if spec.kind is TaskKind.ONE_TO_MANY:
        for lang in range(spec.languages):
            tags[lang] = len(tokens)
            tokens.append(f"<2{language_name(lang)}>")
    return Vocabulary(tokens=tokens, languages=languages, tags=tags)


def substitution_map(spec: TaskSpec, vocab: Vocabulary, lang: int) -> Dict[int, int]:
    """Seeded bijection from hub ids to the ids of language ``lang``."""
    hub_lo, hub_hi = vocab.languages[HUB]
    lo, _ = vocab.languages[language_name(lang)]
    perm = list(range(spec.vocab_size))
    random.Random(derive_seed(spec.seed, _MAP_STREAM, lang)).shuffle(perm)
    return {hub_lo + i: lo + perm[i] for i in range(hub_hi - hub_lo)}


def swap_adjacent_pairs(tokens: Sequence[int]) -> Tuple[int, ...]:
    """(a, b, c, d, e) -> (b, a, d, c, e)."""
    out = list(tokens)
    for i in range(0, len(out) - 1, 2):
        out[i], out[i + 1] = out[i + 1], out[i]
    return tuple(out)


def translate(sentence: Sequence[int], mapping: Dict[int, int]) -> Tuple[int, ...]:
    return swap_adjacent_pairs([mapping[t] for t in sentence])


@dataclass
class Corpus:
    """
    Generated splits.

    Attributes:
        vocab (Vocabulary): Shared vocabulary.
        splits (Dict[str, List[Example]]): train / valid / test.
        collisions (int): Rejected draws that duplicated an earlier source.
        draws (int): Total draws.
    """
    vocab: Vocabulary
    splits: Dict[str, List[Example]] = field(default_factory=dict)
    collisions: int = 0
    draws: int = 0

    @property
    def collision_rate(self) -> float:
        return self.collisions / self.draws if self.draws else 0.0


class TaskGenerator:
    """Draws examples for one TaskSpec."""

    def __init__(self, spec: TaskSpec):
        self.spec = spec
        self.vocab = build_vocabulary(spec)
        self.maps: List[Dict[int, int]] = []
        if spec.kind is TaskKind.TOY_TRANSLATION:
            self.maps = [substitution_map(spec, self.vocab, 0)]
        elif spec.is_multilingual:
            self.maps = [substitution_map(spec, self.vocab, lang) for lang in range(spec.languages)]

    def _hub_sentence(self, rng: random.Random) -> List[int]:
        lo, hi = self.vocab.languages[HUB]
        length = rng.randint(self.spec.min_len, self.spec.max_len)
        return [rng.randrange(lo, hi) for _ in range(length)]

    def draw(self, rng: random.Random) -> Tuple[Tuple[int, ...], Tuple[int, ...], Optional[int]]:
        """One (src, tgt, lang) triple."""
        kind = self.spec.kind
        sentence = self._hub_sentence(rng)
        if kind is TaskKind.COPY:
            return tuple(sentence), tuple(sentence), None
        if kind is TaskKind.REVERSE:
            return tuple(sentence), tuple(reversed(sentence)), None
        if kind is TaskKind.TOY_TRANSLATION:
            return tuple(sentence), translate(sentence, self.maps[0]), None
        lang = rng.randrange(self.spec.languages)
        if kind is TaskKind.ONE_TO_MANY:
            return (self.vocab.tags[lang], *sentence), translate(sentence, self.maps[lang]), lang
        # many_to_one: the hub sentence is the target of its translation
        return translate(sentence, self.maps[lang]), tuple(sentence), lang

    def build(self) -> Corpus:
        corpus = Corpus(vocab=self.vocab)
        seen: Set[Tuple[int, ...]] = set()
        sizes = {"train": self.spec.n_train, "valid": self.spec.n_valid, "test": self.spec.n_test}
        for split_index, split in enumerate(SPLITS):
            rng = random.Random(derive_seed(self.spec.seed, split_index))
            examples: List[Example] = []
            budget = _MAX_ATTEMPTS_FACTOR * max(1, sizes[split])
            while len(examples) < sizes[split]:
                if budget == 0:
                    raise ConfigError(
                        f"task space too small: could not draw {sizes[split]} distinct {split} sources"
                    )
                budget -= 1
                src, tgt, lang = self.draw(rng)
                corpus.draws += 1
                if src in seen:
                    corpus.collisions += 1
                    continue
                seen.add(src)
                examples.append(Example(src=src, tgt=tgt, lang=lang, index=len(examples)))
            corpus.splits[split] = examples
        return corpus


def build_corpus(spec: TaskSpec) -> Corpus:
    """In-memory corpus for ``spec``."""
    return TaskGenerator(spec).build()


def generate_dataset(spec: TaskSpec, out_dir: Path) -> Corpus:
    """
    Write train/valid/test JSONL splits, vocab.json and checksums.json.

    Sources duplicated across (or within) splits are rejected and redrawn; the
    collision rate is logged and returned on the corpus.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = build_corpus(spec)
    for split in SPLITS:
        write_jsonl(split_path(out_dir, split), corpus.splits[split])
    corpus.vocab.save(out_dir / VOCAB_FILE)
    checksums = directory_checksums(out_dir)
    (out_dir / CHECKSUM_FILE).write_text(json.dumps(checksums, indent=1, sort_keys=True) + "\n")
    logger.info(
        "generated %s corpus in %s: %s, collision rate %.4f",
        spec.kind.value, out_dir,
        " ".join(f"{s}={len(corpus.splits[s])}" for s in SPLITS),
        corpus.collision_rate,
    )
    return corpus


def language_accuracy(
    hypotheses: Sequence[Sequence[int]],
    languages: Sequence[int],
    vocab: Vocabulary,
) -> float:
    """
    Fraction of hypotheses written in their tagged language.

    A hypothesis counts when the tagged language strictly wins the majority
    vote over its tokens' language ranges.
    """
    if not hypotheses:
        raise EmptyCorpusError("language accuracy of an empty corpus")
    correct = 0
    for hyp, lang in zip(hypotheses, languages):
        votes = Counter(vocab.language_of(t) for t in hyp)
        votes.pop(None, None)
        want = votes.get(language_name(lang), 0)
        if want > 0 and all(count < want for name, count in votes.items() if name != language_name(lang)):
            correct += 1
    return correct / len(hypotheses)
