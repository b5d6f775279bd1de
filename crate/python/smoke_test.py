"""Smoke test for the textguard extension module.

Build first:  cargo build --release -p textguard-py
Then run:     python3 python/smoke_test.py
"""

import os
import shutil
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.dirname(HERE)
LIB = os.path.join(ROOT, "target", "release", "libtextguard.so")

shutil.copy(LIB, os.path.join(HERE, "textguard.so"))
sys.path.insert(0, HERE)

import textguard as tg  # noqa: E402


def main():
    assert tg.normalize_text("  Hello   @user https://x.co  ") != ""

    texts = ["you are a loser", "what a lovely day", "total loser idiot", "coffee in the garden"]
    vocab = tg.Vocab.train(texts, 80)
    ids, mask = vocab.encode("lovely loser", 12)
    assert len(ids) == len(mask) == 12
    assert "lovely" in vocab.decode(ids)

    docs = [vocab.encode(t, 12) for t in texts]
    tfidf = tg.TfIdf.fit(docs, len(vocab))
    feats = [tfidf.transform(i, m) for i, m in docs]
    labels = [1, 0, 1, 0]
    svm = tg.LinearSvm.train(feats, labels, "A")
    assert [svm.predict(f) for f in feats] == labels

    report = tg.evaluate(labels, [1, 0, 0, 0], "A")
    assert 0.0 < report["macro_f1"] < 1.0 and report["accuracy"] == 0.75

    enc = tg.Encoder(len(vocab), 2, "mini", 12)
    logits = enc.logits(docs)
    assert len(logits) == 4 and all(len(r) == 2 for r in logits)
    assert enc.parameter_count() > 0

    with tempfile.TemporaryDirectory() as tmp:
        ckpt = os.path.join(tmp, "enc.ckpt")
        enc.save(ckpt)
        assert tg.Encoder.load(ckpt).logits(docs) == logits

        data = os.path.join(tmp, "data")
        tg.synth("separable", data)
        run = os.path.join(tmp, "run")
        r = tg.train({"data": data, "out": run, "model": "svm-tfidf", "vocab_size": 300})
        assert r["accuracy"] > 0.9, r
        assert tg.predict(run, ["moron trash loser", "garden picnic coffee"]) == ["HOF", "NOT"]

        try:
            tg.train({"model": "bert"})
        except ValueError:
            pass
        else:
            raise AssertionError("bad model accepted")

    print("python smoke test ok")


if __name__ == "__main__":
    main()
