"""Independent brute-force oracles for the generated datasets."""

from compgen.data import Example


def parse_operand(tokens):
    text = "".join(t for t in tokens if t != "#")
    return int(text) if text else 0


def addition_oracle(ex: Example, padded_target=False):
    cut = ex.src.index("+")
    total = parse_operand(ex.src[:cut]) + parse_operand(ex.src[cut + 1 :])
    text = str(total)
    tokens = list(text)
    if padded_target:
        width = cut
        tokens = ["#"] * (width - len(tokens)) + tokens
    return tuple(tokens)


def reverse_oracle(ex):
    out = []
    for i in range(len(ex.src) - 1, -1, -1):
        out.append(ex.src[i])
    return tuple(out)


def duplicate_oracle(ex):
    out = []
    for _ in range(2):
        for tok in ex.src:
            out.append(tok)
    return tuple(out)


def cartesian_oracle(ex):
    cut = ex.src.index("|")
    out = []
    for x in ex.src[:cut]:
        for y in ex.src[cut + 1 :]:
            out.append(x)
            out.append(y)
    return tuple(out)


def intersection_oracle(ex):
    cut = ex.src.index("|")
    left, right = ex.src[:cut], ex.src[cut + 1 :]
    for a in left:
        for b in right:
            if a == b:
                return ("true",)
    return ("false",)


def revdup_oracle(ex):
    body = Example(ex.src[1:])
    return reverse_oracle(body) if ex.src[0] == "reverse" else duplicate_oracle(body)


ORACLES = {
    "add": addition_oracle,
    "addneg": addition_oracle,
    "reverse": reverse_oracle,
    "dup": duplicate_oracle,
    "cart": cartesian_oracle,
    "inters": intersection_oracle,
    "revdup": revdup_oracle,
}
