"""Prompt templates and rule-family phrasings shared by the task renderer and the vocabulary.

Placeholders: {LABEL}, {STT}, {EDT} in the single-clip instruction tables;
the reasoning and question-answer families use their own named fields.
"""

from __future__ import annotations

AT = (
    "Summarize the audio with key words.",
    "What sound events can be heard in the audio clip?",
    "What auditory incidents can be recognized in the recording?",
    "Which auditory occurrences can be detected?",
    "Which sound occurrences can be perceived?",
    "Present a concise breakdown of the given audio clips.",
    "List the sound events in the audio clip.",
    "Describe the recording with names of sound events.",
    "Enumerate the audio events present in the audio.",
    "Name the auditory incidents in the audio sample.",
)

AAC = (
    "Summarize the audio succinctly.",
    "Present a short overview of the provided audio samples.",
    "Provide a compact summary of the auditory content.",
    "Offer a brief outline of the audio clips that have been given.",
    "Render a compressed version of the audio’s main points.",
    "Describe the audio clip concisely.",
    "Explain the audio clip in a brief and straightforward manner.",
    "Write a terse but informative summary of the sound.",
    "Give a quick overview of the provided audio excerpts.",
    "Outline the given audio samples briefly.",
)

QSED = (
    "Pinpoint the presence of {LABEL} with the time stamps.",
    "Indicate the start and end time of the audio event {LABEL}.",
    "Document the exact times the sound {LABEL} taking place.",
    "Specify the time stamps for {LABEL} occurrence.",
    "When the sound {LABEL} happens?",
    "Capture the exact times when {LABEL} is happening.",
    "Describe the time intervals during which {LABEL} takes place.",
    "State the precise moment at which {LABEL} occurs.",
    "What time does the sound event {LABEL} take place?",
    "Capture the beginning and end time of the sound {LABEL}.",
)

TER = (
    "Summarize the audio with key words in the interval of {STT} seconds to {EDT} seconds.",
    "What sound events can be heard from {STT} seconds to {EDT} seconds?",
    "What auditory incidents can be recognized in the recording from {STT} seconds to {EDT} seconds?",
    "Which auditory occurrences can be detected during {STT} seconds to {EDT} seconds?",
    "Which sound occurrences can be perceived between {STT} seconds and {EDT} seconds?",
    "Present a concise breakdown of the recording from {STT} seconds to {EDT} seconds.",
    "List the sound events in the interval of {STT} seconds to {EDT} seconds.",
    "Name the auditory incidents within the {STT} to {EDT} seconds timeframe.",
    "Enumerate the audio events present between {STT} seconds and {EDT} seconds.",
    "Describe the recording with names of sound events within the {STT} to {EDT} seconds timeframe.",
)

SEC = (
    "How many times can the sound {LABEL} be heard?",
    "How many instances of the sound {LABEL} can be perceived?",
    "What is the number of times the sound {LABEL} is detectable?",
    "How frequently can one hear the sound {LABEL}?",
    "How often can the sound {LABEL} be perceived?",
)

SINGLE_CLIP = {"AT": AT, "AAC": AAC, "QSED": QSED, "TER": TER, "SEC": SEC}

# #Output row per task: how the target string is shaped
OUTPUT_FORM = {"AT": "{LABEL}", "AAC": "{CAPTION}", "QSED": "{STT}s-{EDT}s", "TER": "{LABEL}", "SEC": "{NUMBER}"}

AQA = {
    "presence": "Is there a {LABEL} in the audio?",
    "count": "How many times does the {LABEL} occur?",
    "first": "Which sound event happens first?",
}

FEW_SHOT_PROMPT = "This is a sound of"

# request sent to an external generator for one sound's description
DESCRIBE_REQUEST = "Acoustic features of {LABEL} in at most ten words:"

NLAR = {
    "sum-binary": "Are there {A} {L1} and {B} {L2} sounds in total?",
    "sum-count": "How many {L1} or {L2} sounds are there in total?",
    "qualitative-binary": "Does the {ORD} recording create a continuous sound throughout?",
    "which-recording": "In which recording are the events more frequent?",
    "comparison-binary": "Is the {L1} in the first recording heard more often than the {L2} in the second recording?",
}
NLAR_FAMILIES = tuple(NLAR)

# caption grammar words
CAPTION_WORDS = ("once", "twice", "times", "and", "throughout", "silence", "then", "while")
ANSWER_WORDS = ("yes", "no", "first", "second", "none")

MAX_NUMBER = 30
TIME_STEP = 0.1
MAX_TIME = 10.0


def all_template_text():
    """Every literal template string (placeholders left in)."""
    out = []
    for group in SINGLE_CLIP.values():
        out.extend(group)
    out.extend(AQA.values())
    out.extend(NLAR.values())
    out.append(FEW_SHOT_PROMPT)
    return out
