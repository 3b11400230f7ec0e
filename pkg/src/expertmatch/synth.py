"""Synthetic forum corpora with planted expertise topics.

Every doctor gets a primary topic (round-robin) holding ``expertise_concentration``
of their topic mixture; dialogues sample a topic from that mixture and draw
tokens from the topic's vocabulary or from a shared noise pool. Profiles are
written in a separate register: the same draws, surfaced through "p_"-prefixed
synonym tokens, so profiles and dialogues share no surface vocabulary and only
cross-register alignment can link them.

``doctor_token_bias`` > 0 skews each doctor's within-topic token usage in
dialogues toward a doctor-specific half of the topic vocabulary, making
same-topic doctors distinguishable the way same-department experts specialize
in practice. Profiles stay topic-generic regardless: like real expert profiles,
they say which field a doctor works in, while the individual specialization
shows only in the dialogues. At 0 (the default), same-topic doctors are
statistically identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .corpus import Corpus, Dialogue, Doctor, Turn
from .tensor import SplitMix64, derive_seed


@dataclass(frozen=True)
class SynthConfig:
    n_topics: int = 5
    n_doctors: int = 20
    dialogues_per_doctor: int = 40
    turns_per_dialogue: int = 4
    tokens_per_turn: int = 12
    vocab_per_topic: int = 60
    shared_noise_vocab: int = 40
    noise_fraction: float = 0.3
    expertise_concentration: float = 0.9
    doctor_token_bias: float = 0.0
    profile_tokens: int = 24
    seed: int = 0

    def __post_init__(self):
        if self.n_topics < 1 or self.n_doctors < 1:
            raise ValueError("need at least one topic and one doctor")
        if self.dialogues_per_doctor < 1 or self.turns_per_dialogue < 1:
            raise ValueError("dialogues need at least one turn each")
        if self.tokens_per_turn < 1 or self.vocab_per_topic < 1:
            raise ValueError("turns and topic vocabularies must be non-empty")
        if not (0.0 <= self.noise_fraction < 1.0):
            raise ValueError(f"noise_fraction must be in [0, 1), got {self.noise_fraction}")
        if not (0.0 < self.expertise_concentration <= 1.0):
            raise ValueError("expertise_concentration must be in (0, 1]")
        if not (0.0 <= self.doctor_token_bias <= 1.0):
            raise ValueError("doctor_token_bias must be in [0, 1]")
        if self.noise_fraction > 0.0 and self.shared_noise_vocab < 1:
            raise ValueError("noise_fraction > 0 needs a non-empty noise vocabulary")


@dataclass(frozen=True)
class GroundTruth:
    doctor_mixtures: dict[str, dict[int, float]]
    dialogue_topics: dict[str, int]
    topic_vocab: dict[int, tuple[str, ...]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "doctors": {d: {str(t): w for t, w in mix.items()}
                        for d, mix in self.doctor_mixtures.items()},
            "dialogues": dict(self.dialogue_topics),
            "topic_vocab": {str(t): list(v) for t, v in self.topic_vocab.items()},
        }


def topic_token(topic: int, i: int) -> str:
    return f"t{topic}_{i}"


def profile_register(token: str) -> str:
    return f"p_{token}"


class _TokenSampler:
    """Per-(doctor, topic) distribution over the topic vocabulary.

    With bias b, a doctor draws with probability b from their preferred half of
    the topic's terms (a doctor-specific seeded subset) and uniformly from the
    whole vocabulary otherwise. The preference is broad and flat on purpose:
    recovering it takes volume, which history dialogues have and short queries
    do not.
    """

    def __init__(self, cfg: SynthConfig, doctor_index: int, topic: int):
        w = cfg.vocab_per_topic
        self._size = w
        self._bias = cfg.doctor_token_bias
        if self._bias == 0.0:
            self._subset: list[int] | None = None
        else:
            rng = SplitMix64(derive_seed(cfg.seed,
                                         1_000_003 + doctor_index * cfg.n_topics + topic))
            idx = list(range(w))
            rng.shuffle(idx)
            self._subset = sorted(idx[:max(1, w // 2)])

    def draw(self, rng: SplitMix64) -> int:
        if self._subset is not None and rng.uniform() < self._bias:
            return self._subset[rng.below(len(self._subset))]
        return rng.below(self._size)


def generate(cfg: SynthConfig) -> tuple[Corpus, GroundTruth]:
    rng = SplitMix64(cfg.seed)
    mixtures: dict[str, dict[int, float]] = {}
    doctors: dict[str, Doctor] = {}
    dialogues: dict[str, Dialogue] = {}
    dialogue_topics: dict[str, int] = {}

    id_width = max(2, len(str(cfg.n_doctors - 1)))
    doctor_ids = [f"doc{str(i).zfill(id_width)}" for i in range(cfg.n_doctors)]

    samplers: dict[tuple[int, int], _TokenSampler] = {}
    flat_cfg = cfg if cfg.doctor_token_bias == 0.0 else None

    def sampler(doctor_index: int, topic: int, biased: bool) -> _TokenSampler:
        key = (doctor_index if biased else -1, topic)
        if key not in samplers:
            if biased:
                samplers[key] = _TokenSampler(cfg, doctor_index, topic)
            else:
                nonlocal flat_cfg
                if flat_cfg is None:
                    flat_cfg = SynthConfig(**{**cfg.__dict__, "doctor_token_bias": 0.0})
                samplers[key] = _TokenSampler(flat_cfg, 0, topic)
        return samplers[key]

    def draw_topic(mixture: dict[int, float]) -> int:
        u = rng.uniform()
        acc = 0.0
        for topic, w in mixture.items():
            acc += w
            if u < acc:
                return topic
        return next(reversed(mixture))

    def draw_tokens(doctor_index: int, topic: int, count: int,
                    biased: bool = True) -> list[str]:
        out = []
        for _ in range(count):
            if cfg.noise_fraction > 0.0 and rng.uniform() < cfg.noise_fraction:
                out.append(f"noise_{rng.below(cfg.shared_noise_vocab)}")
            else:
                out.append(topic_token(topic, sampler(doctor_index, topic, biased).draw(rng)))
        return out

    for i, doctor_id in enumerate(doctor_ids):
        primary = i % cfg.n_topics
        if cfg.n_topics == 1:
            mixture = {0: 1.0}
        else:
            rest = (1.0 - cfg.expertise_concentration) / (cfg.n_topics - 1)
            mixture = {t: (cfg.expertise_concentration if t == primary else rest)
                       for t in range(cfg.n_topics)}
        mixtures[doctor_id] = mixture

        # profile: per-token topic draw from the mixture, rendered in the
        # profile register so no surface form is shared with dialogues;
        # unbiased draws keep profiles field-level rather than doctor-specific
        profile_words = []
        for _ in range(cfg.profile_tokens):
            t = draw_topic(mixture)
            tok = draw_tokens(i, t, 1, biased=False)[0]
            profile_words.append(profile_register(tok))
        doctors[doctor_id] = Doctor(doctor_id=doctor_id,
                                    department=f"dept{primary}",
                                    profile_text=" ".join(profile_words))

        for j in range(cfg.dialogues_per_doctor):
            topic = draw_topic(mixture)
            dialogue_id = f"{doctor_id}-dlg{str(j).zfill(3)}"
            turns = []
            for k in range(cfg.turns_per_dialogue):
                role = "patient" if k % 2 == 0 else "doctor"
                turns.append(Turn(role=role,
                                  text=" ".join(draw_tokens(i, topic, cfg.tokens_per_turn))))
            dialogues[dialogue_id] = Dialogue(dialogue_id=dialogue_id,
                                              doctor_id=doctor_id, turns=tuple(turns))
            dialogue_topics[dialogue_id] = topic
            doctors[doctor_id].dialogue_ids.append(dialogue_id)

    topic_vocab = {t: tuple(topic_token(t, i) for i in range(cfg.vocab_per_topic))
                   for t in range(cfg.n_topics)}
    return (Corpus(doctors, dialogues),
            GroundTruth(mixtures, dialogue_topics, topic_vocab))


def write_ground_truth(path, truth: GroundTruth) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(truth.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
