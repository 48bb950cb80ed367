"""Reserved token ids shared by every toy language."""

CLS, SEP, MASK, PAD, UNK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]")
SPECIAL_IDS = frozenset(range(len(SPECIAL_TOKENS)))
N_SPECIAL = len(SPECIAL_TOKENS)
IGNORE_INDEX = -100
