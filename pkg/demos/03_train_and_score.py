"""
Training a scorer
=================

Fit a small state-space classifier on a synthetic essay corpus and report
quadratic weighted kappa by grade.
"""

from longscore.corpus import Vocab, length_stats, render_prompt, synthetic_corpus
from longscore.model import ModelConfig, build_classifier
from longscore.metrics import format_report_text
from longscore.training import TrainConfig, evaluate, train

corpus = synthetic_corpus(400, 100, seed=0)
vocab = Vocab.from_corpus(corpus)
for row in length_stats(corpus):
    print(row)

# the instruction format used for generative fine-tuning
user, assistant = render_prompt("A 6 is excellent; a 1 is weak.", corpus.records[0].full_text[:80] + " ...", 3)
print(user)
print(assistant)

cfg = ModelConfig("ssm", len(vocab), corpus.n_classes, d_model=16, state_dim=4)
model = build_classifier(cfg, seed=0)
report = train(model, corpus.split("train"), TrainConfig.for_architecture("ssm", lr=1e-2, epochs=4), vocab)
print(report.to_log())

table, kappa = evaluate(model, corpus.split("test"), vocab, "ssm")
print(format_report_text([kappa]))
