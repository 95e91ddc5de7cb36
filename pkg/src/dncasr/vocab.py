"""Token id layout shared by the simulator, the ASR decoder and scoring.

Word ``w`` of the simulator vocabulary maps to model id ``w + NUM_SPECIAL``.
``<sbos>`` and ``<pad>`` are not word ids: they are learnable vectors owned by
the DNC decoder.
"""

BOS = 0
SC = 1
EOS = 2
NUM_SPECIAL = 3

SPECIAL_NAMES = {BOS: "<bos>", SC: "<sc>", EOS: "<eos>"}


def word_to_id(word: int) -> int:
    return word + NUM_SPECIAL


def id_to_word(token_id: int) -> int:
    if token_id < NUM_SPECIAL:
        raise ValueError(f"token id {token_id} is a special token")
    return token_id - NUM_SPECIAL


def model_vocab_size(num_words: int) -> int:
    return num_words + NUM_SPECIAL


def token_str(token_id: int) -> str:
    if token_id in SPECIAL_NAMES:
        return SPECIAL_NAMES[token_id]
    return f"w{id_to_word(token_id)}"


def parse_token(text: str) -> int:
    for tid, name in SPECIAL_NAMES.items():
        if text == name:
            return tid
    if not text.startswith("w"):
        raise ValueError(f"unknown token {text!r}")
    return word_to_id(int(text[1:]))
