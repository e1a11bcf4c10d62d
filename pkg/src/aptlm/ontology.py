"""The closed synthetic sound-event ontology.

Each class has a fixed synthesis recipe placed in its own region of a
40-band mel layout over 0-8 kHz, a flag saying whether its occurrences are
countable, and a short acoustic descriptor.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractViolation

THROUGHOUT = "throughout the recording"


@dataclass(frozen=True)
class SoundClass:
    label: str
    synth: tuple  # ("tone", hz) | ("noise", lo_hz, hi_hz) | ("chirp", f0_hz, f1_hz)
    countable: bool
    descriptor: str


CLASSES = (
    SoundClass("thunder", ("noise", 20.0, 120.0), True, "explosive, rumbling, and reverberating"),
    SoundClass("door knock", ("tone", 142.0), True, "dull, hollow, and percussive"),
    SoundClass("engine", ("tone", 195.0), False, "low, steady, and humming"),
    SoundClass("footsteps", ("noise", 225.0, 345.0), True, "soft, padded, and evenly paced"),
    SoundClass("wood creaking", ("chirp", 376.0, 517.0), True, "rustic, rhythmic, and creaky"),
    SoundClass("dog bark", ("noise", 560.0, 720.0), True, "sharp, loud, and abrupt"),
    SoundClass("car horn", ("tone", 764.0), True, "loud, blaring, and insistent"),
    SoundClass("cat meow", ("chirp", 856.0, 1060.0), True, "high, whiny, and drawn out"),
    SoundClass("alarm", ("tone", 1171.0), True, "piercing, repetitive, and urgent"),
    SoundClass("wind", ("noise", 1230.0, 1480.0), False, "whooshing, airy, and restless"),
    SoundClass("bell ring", ("tone", 1550.0), True, "clear, resonant, and ringing"),
    SoundClass("water", ("noise", 1620.0, 1920.0), False, "rapid, and draining water sound"),
    SoundClass("siren", ("chirp", 2006.0, 2360.0), True, "wailing, rising, and urgent"),
    SoundClass("phone ring", ("tone", 2554.0), True, "shrill, electronic, and repeating"),
    SoundClass("keyboard typing", ("noise", 2650.0, 3100.0), True, "rapid, clicky, and mechanical"),
    SoundClass("tapping glass", ("tone", 3213.0), True, "crisp, clear, and tingling sound"),
    SoundClass("cough", ("noise", 3330.0, 3860.0), True, "harsh, short, and raspy"),
    SoundClass("whistle", ("tone", 4005.0), True, "thin, shrill, and piercing"),
    SoundClass("bird chirp", ("chirp", 4304.0, 4958.0), True, "bright, high-pitched, and melodic"),
    SoundClass("clock tick", ("tone", 5317.0), True, "small, sharp, and regular"),
    SoundClass("shower", ("noise", 5500.0, 6300.0), False, "droplets, soothingly cascading"),
    SoundClass("hammer", ("tone", 6535.0), True, "hard, metallic, and striking"),
    SoundClass("rain", ("noise", 6750.0, 7900.0), False, "gentle, pitter-patter, rhythmic"),
    SoundClass("applause", ("noise", 2090.0, 4150.0), False, "clapping, lively, and scattered"),
)

LABELS = tuple(c.label for c in CLASSES)
BY_LABEL = {c.label: c for c in CLASSES}
COUNTABLE = tuple(c.label for c in CLASSES if c.countable)
CONTINUOUS = tuple(c.label for c in CLASSES if not c.countable)


def lookup(label: str) -> SoundClass:
    try:
        return BY_LABEL[label]
    except KeyError:
        raise ContractViolation(f"label {label!r} is not in the ontology") from None
