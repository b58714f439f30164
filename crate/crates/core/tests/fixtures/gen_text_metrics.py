"""Regenerates text_metrics.json from nltk (BLEU-4) and rouge-score (ROUGE-L).

BLEU uses nltk's clipping, brevity penalty and geometric mean with add-one
smoothing applied only to zero-count orders n >= 2.
"""
import json
import random
from fractions import Fraction

from nltk.translate.bleu_score import sentence_bleu
from rouge_score import rouge_scorer

VOCAB = "the a cat dog sat on mat red blue big small runs jumps over under tree house car".split()


def add_one_on_zero(p_n, *args, **kwargs):
    return [
        Fraction(p.numerator + 1, p.denominator + 1, _normalize=False) if i > 0 and p.numerator == 0 else p
        for i, p in enumerate(p_n)
    ]


def sentence(rng):
    return " ".join(rng.choice(VOCAB) for _ in range(rng.randint(1, 9)))


def main():
    rng = random.Random(20261016)
    scorer = rouge_scorer.RougeScorer(["rougeL"], use_stemmer=False)
    cases = []
    for i in range(50):
        refs = [sentence(rng) for _ in range(rng.randint(1, 3))]
        if i % 5 == 0:
            pred = refs[0]
        elif i % 5 == 1:
            words = refs[-1].split()
            pred = " ".join(words[: max(1, len(words) - 2)] + [rng.choice(VOCAB)])
        else:
            pred = sentence(rng)
        bleu = sentence_bleu([r.split() for r in refs], pred.split(), smoothing_function=add_one_on_zero)
        rouge = max(scorer.score(r, pred)["rougeL"].fmeasure for r in refs)
        cases.append({"prediction": pred, "references": refs, "bleu4": bleu, "rouge_l": rouge})
    extra = {"prediction": "the the the", "references": ["the cat sat on the mat"]}
    extra["bleu4"] = sentence_bleu([extra["references"][0].split()], extra["prediction"].split(), smoothing_function=add_one_on_zero)
    extra["rouge_l"] = scorer.score(extra["references"][0], extra["prediction"])["rougeL"].fmeasure
    json.dump({"cases": cases, "the_the_the": extra}, open("text_metrics.json", "w"), indent=1)


if __name__ == "__main__":
    main()
