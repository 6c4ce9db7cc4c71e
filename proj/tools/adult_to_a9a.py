#!/usr/bin/env python3
"""Rebuild the a9a/a9a.t LIBSVM files from the raw UCI Adult files.

a9a is the 123-feature binarization of Adult: every categorical attribute is
one-hot encoded in the attribute order of adult.names, the continuous
attributes age, fnlwgt, education-num and hours-per-week are cut into five
quantile bins, and capital-gain / capital-loss become zero / nonzero pairs.
Missing values ("?") produce no feature. Bin edges come from the training
file only.

    python3 tools/adult_to_a9a.py adult.data adult.test data/a9a data/a9a.t
"""
import sys

CATEGORIES = {
    "workclass": "Private, Self-emp-not-inc, Self-emp-inc, Federal-gov, Local-gov, State-gov, "
                 "Without-pay, Never-worked",
    "education": "Bachelors, Some-college, 11th, HS-grad, Prof-school, Assoc-acdm, Assoc-voc, 9th, "
                 "7th-8th, 12th, Masters, 1st-4th, 10th, Doctorate, 5th-6th, Preschool",
    "marital": "Married-civ-spouse, Divorced, Never-married, Separated, Widowed, "
               "Married-spouse-absent, Married-AF-spouse",
    "occupation": "Tech-support, Craft-repair, Other-service, Sales, Exec-managerial, Prof-specialty, "
                  "Handlers-cleaners, Machine-op-inspct, Adm-clerical, Farming-fishing, "
                  "Transport-moving, Priv-house-serv, Protective-serv, Armed-Forces",
    "relationship": "Wife, Own-child, Husband, Not-in-family, Other-relative, Unmarried",
    "race": "White, Asian-Pac-Islander, Amer-Indian-Eskimo, Other, Black",
    "sex": "Female, Male",
    "country": "United-States, Cambodia, England, Puerto-Rico, Canada, Germany, "
               "Outlying-US(Guam-USVI-etc), India, Japan, Greece, South, China, Cuba, Iran, Honduras, "
               "Philippines, Italy, Poland, Jamaica, Vietnam, Mexico, Portugal, Ireland, France, "
               "Dominican-Republic, Laos, Ecuador, Taiwan, Haiti, Columbia, Hungary, Guatemala, "
               "Nicaragua, Scotland, Thailand, Yugoslavia, El-Salvador, Trinadad&Tobago, Peru, Hong, "
               "Holand-Netherlands",
}
CATEGORIES = {k: [s.strip() for s in v.split(",")] for k, v in CATEGORIES.items()}

# (column index in adult.data, kind, name)
LAYOUT = [
    (0, "quintile", "age"),
    (1, "cat", "workclass"),
    (2, "quintile", "fnlwgt"),
    (3, "cat", "education"),
    (4, "quintile", "education-num"),
    (5, "cat", "marital"),
    (6, "cat", "occupation"),
    (7, "cat", "relationship"),
    (8, "cat", "race"),
    (9, "cat", "sex"),
    (10, "nonzero", "capital-gain"),
    (11, "nonzero", "capital-loss"),
    (12, "quintile", "hours-per-week"),
    (13, "cat", "country"),
]


def read_rows(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("|"):
                continue
            fields = [f.strip() for f in line.split(",")]
            if len(fields) != 15:
                continue
            rows.append(fields)
    return rows


def quintile_edges(values):
    values = sorted(values)
    n = len(values)
    return [values[int(q * n / 5)] for q in range(1, 5)]


def encode(rows, edges):
    out = []
    for fields in rows:
        idx = []
        base = 1
        for col, kind, name in LAYOUT:
            raw = fields[col]
            if kind == "quintile":
                v = float(raw)
                idx.append(base + sum(1 for e in edges[name] if v >= e))
                base += 5
            elif kind == "nonzero":
                idx.append(base + (1 if float(raw) != 0.0 else 0))
                base += 2
            else:
                cats = CATEGORIES[name]
                if raw != "?":
                    idx.append(base + cats.index(raw))
                base += len(cats)
        assert base - 1 == 123
        label = "+1" if fields[14].rstrip(".") == ">50K" else "-1"
        out.append(label + " " + " ".join(f"{i}:1" for i in idx))
    return out


def main(argv):
    if len(argv) != 5:
        sys.stderr.write(__doc__)
        return 1
    train, test = read_rows(argv[1]), read_rows(argv[2])
    edges = {name: quintile_edges([float(r[col]) for r in train])
             for col, kind, name in LAYOUT if kind == "quintile"}
    for rows, path in ((train, argv[3]), (test, argv[4])):
        with open(path, "w") as fh:
            fh.write("\n".join(encode(rows, edges)) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv))
