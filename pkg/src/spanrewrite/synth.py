"""Synthetic English-like corpus with subject-verb agreement and tense cues.

Small enough to learn at desk scale, structured enough that infilling and
rewriting carry signal: tense is signalled by time expressions, verbs agree
with their subjects, and a few fixed facts recur.
"""

from __future__ import annotations

import numpy as np

NOUNS = [
    ("cat", "cats"), ("dog", "dogs"), ("teacher", "teachers"), ("student", "students"),
    ("friend", "friends"), ("farmer", "farmers"), ("doctor", "doctors"), ("child", "children"),
    ("man", "men"), ("woman", "women"), ("engineer", "engineers"), ("bird", "birds"),
    ("pilot", "pilots"), ("writer", "writers"), ("baker", "bakers"), ("neighbor", "neighbors"),
]
THINGS = [
    ("car", "cars"), ("book", "books"), ("letter", "letters"), ("house", "houses"),
    ("song", "songs"), ("report", "reports"), ("ship", "ships"), ("rocket", "rockets"),
    ("apple", "apples"), ("box", "boxes"), ("table", "tables"), ("garden", "gardens"),
    ("picture", "pictures"), ("bridge", "bridges"), ("bicycle", "bicycles"), ("cake", "cakes"),
]
TRANSITIVE = [
    ("see", "sees", "saw"), ("find", "finds", "found"), ("buy", "buys", "bought"),
    ("like", "likes", "liked"), ("build", "builds", "built"), ("write", "writes", "wrote"),
    ("carry", "carries", "carried"), ("open", "opens", "opened"), ("watch", "watches", "watched"),
    ("paint", "paints", "painted"), ("sell", "sells", "sold"), ("clean", "cleans", "cleaned"),
    ("take", "takes", "took"), ("bring", "brings", "brought"), ("draw", "draws", "drew"),
]
MOTION = [
    ("go", "goes", "went"), ("walk", "walks", "walked"), ("run", "runs", "ran"),
    ("drive", "drives", "drove"), ("travel", "travels", "traveled"), ("return", "returns", "returned"),
]
PLACES = ["school", "work", "the park", "the market", "the city", "the river", "the station", "the library"]
ADJECTIVES = [
    "big", "small", "old", "new", "red", "green", "happy", "quiet", "busy", "young",
    "bright", "heavy", "cold", "warm", "large", "famous",
]
DET_SG = ["the", "a", "this", "that", "every", "my", "our", "his", "her"]
DET_PL = ["the", "these", "those", "many", "some", "my", "our", "two", "three"]
PAST_TIME = ["yesterday", "last week", "last year", "two days ago", "in 2002", "in 1999"]
PRESENT_TIME = ["every day", "usually", "often", "on sundays", "every morning"]
PRONOUNS = [("i", False), ("you", False), ("we", False), ("they", False), ("he", True), ("she", True)]
NAMES = ["anna", "omar", "lena", "kofi", "mira", "paul"]
CONNECTIVES = ["and", "but", "because", "so"]
FACTS = [
    "in 2002 , elon musk founded spacex , an aerospace manufacturer company .",
    "the river flows through the old city .",
    "the library opens at nine every morning .",
]


class SyntheticCorpus:
    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)

    def _pick(self, items):
        return items[int(self.rng.integers(0, len(items)))]

    def _coin(self, p: float) -> bool:
        return bool(self.rng.random() < p)

    def noun_phrase(self, table, plural: bool) -> str:
        sg, pl = self._pick(table)
        det = self._pick(DET_PL if plural else DET_SG)
        words = []
        if self._coin(0.4):
            words.append(self._pick(ADJECTIVES))
        words.append(pl if plural else sg)
        if det == "a" and words[0][0] in "aeiou":
            det = "an"
        return " ".join([det] + words)

    def subject(self) -> tuple[str, bool]:
        """Return (text, is_third_person_singular)."""
        r = self.rng.random()
        if r < 0.2:
            return self._pick(PRONOUNS)
        if r < 0.35:
            return self._pick(NAMES), True
        plural = self._coin(0.4)
        return self.noun_phrase(NOUNS, plural), not plural

    def verb_phrase(self, third_sg: bool, past: bool) -> str:
        form = 2 if past else (1 if third_sg else 0)
        if self._coin(0.6):
            verb = self._pick(TRANSITIVE)[form]
            obj = self.noun_phrase(THINGS, self._coin(0.35))
            vp = f"{verb} {obj}"
            if self._coin(0.25):
                vp += f" in {self._pick(PLACES)}"
            return vp
        verb = self._pick(MOTION)[form]
        return f"{verb} to {self._pick(PLACES)}"

    def clause(self, past: bool) -> str:
        subj, third = self.subject()
        return f"{subj} {self.verb_phrase(third, past)}"

    def sentence(self) -> str:
        if self._coin(0.02):
            return self._pick(FACTS)
        past = self._coin(0.5)
        parts = [self.clause(past)]
        if self._coin(0.3):
            parts.append(self._pick(CONNECTIVES))
            parts.append(self.clause(past))
        time = self._pick(PAST_TIME if past else PRESENT_TIME)
        if self._coin(0.5):
            parts = [time, ","] + parts
        else:
            parts.append(time)
        return " ".join(parts) + " ."

    def sentences(self, n: int) -> list[str]:
        return [self.sentence() for _ in range(n)]


def synthetic_corpus(n: int, seed: int = 0) -> list[str]:
    return SyntheticCorpus(seed).sentences(n)


def write_corpus(path, n: int, seed: int = 0) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for line in synthetic_corpus(n, seed):
            fh.write(line + "\n")
