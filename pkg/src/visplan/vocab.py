"""Word-level text vocabulary, prompt templates and action tokenization."""
from __future__ import annotations

import re

from .gridworld import COLORS, ZONES, Action, IllegalAction

PAD, END = "<pad>", "<eoa>"
IMG_OPEN, IMG_CLOSE = "<Img>", "</Img>"
IMAGE_HERE, ACTION_HERE, TASK_HERE = "<ImageHere>", "<ActionHere>", "<TaskHere>"
SPECIALS = (PAD, END, IMG_OPEN, IMG_CLOSE, IMAGE_HERE, ACTION_HERE, TASK_HERE)

INVERSE_PROMPT = (
    "What is the action between <Img> <ImageHere> </Img> and <Img> <ImageHere> </Img>? "
    "Please infer the actions that took place"
)
FORWARD_PROMPT = (
    "What will happen if <Img> <ImageHere> </Img> takes the action like <ActionHere>? "
    "Please generate an image of the next state"
)
PLAN_PROMPT = (
    "You are given the current image observation <Img> <ImageHere> </Img> and the given "
    "task instruction: <TaskHere>. Please make the next step action decision and generate "
    "the next state image"
)

# instructions are padded to this many tokens so every plan prompt has one layout
TASK_LEN = 10

_TOKEN_RE = re.compile(r"<[^>]+>|\w+|[^\w\s]")


def split_words(text: str) -> list[str]:
    return [w if w.startswith("<") else w.lower() for w in _TOKEN_RE.findall(text)]


def _build_words() -> list[str]:
    words = set()
    for text in (INVERSE_PROMPT, FORWARD_PROMPT, PLAN_PROMPT):
        words.update(split_words(text))
    words.update(split_words("move all the blocks to the area"))
    words.update(split_words("stack all the blocks in column"))
    words.update(split_words("put the blocks in the bowls with matching colors"))
    words.update(split_words("move the block at (0,0) to (0,0)"))
    words.update(ZONES)
    words.update(COLORS)
    words.update(str(d) for d in range(10))
    words.difference_update(SPECIALS)
    return list(SPECIALS) + sorted(words)


WORDS = _build_words()
INDEX = {w: i for i, w in enumerate(WORDS)}
VOCAB_SIZE = len(WORDS)
PAD_ID, END_ID = INDEX[PAD], INDEX[END]


def encode(text: str) -> list[int]:
    try:
        return [INDEX[w] for w in split_words(text)]
    except KeyError as exc:
        raise ValueError(f"out-of-vocabulary word {exc.args[0]!r}") from None


def decode(ids) -> list[str]:
    return [WORDS[int(i)] for i in ids]


def action_tokens(action: Action) -> list[int]:
    """Token ids of an action, terminated by ``<eoa>``."""
    return encode(action.text) + [END_ID]


ACTION_LEN = len(action_tokens(Action(0, (0, 0), (0, 0))))


def tokens_to_action(ids) -> Action:
    """Inverse of :func:`action_tokens`; raises ``IllegalAction`` off-grammar."""
    words = decode(ids)
    if words and words[-1] == END:
        words = words[:-1]
    if len(words) != ACTION_LEN - 1:
        raise IllegalAction(f"malformed action tokens: {' '.join(words)}")
    pattern = ["move", "the", None, "block", "at", "(", None, ",", None, ")", "to", "(", None, ",", None, ")"]
    for w, p in zip(words, pattern):
        if p is not None and w != p:
            raise IllegalAction(f"malformed action tokens: {' '.join(words)}")
    color, r1, c1, r2, c2 = (words[i] for i in (2, 6, 8, 12, 14))
    if color not in COLORS or not all(x.isdigit() for x in (r1, c1, r2, c2)):
        raise IllegalAction(f"malformed action tokens: {' '.join(words)}")
    return Action(COLORS.index(color), (int(r1), int(c1)), (int(r2), int(c2)))


def task_tokens(instruction: str) -> list[int]:
    ids = encode(instruction)
    if len(ids) > TASK_LEN:
        raise ValueError(f"instruction longer than {TASK_LEN} tokens")
    return ids + [PAD_ID] * (TASK_LEN - len(ids))
