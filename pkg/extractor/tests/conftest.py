import json
import sys

import pytest


@pytest.fixture(scope="session")
def model_dir(tmp_path_factory):
    """A tiny randomly initialized causal LM with a word-level tokenizer."""
    import torch
    from tokenizers import Tokenizer, models, pre_tokenizers
    from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

    path = tmp_path_factory.mktemp("tiny-model")
    vocab = {"[PAD]": 0, "[UNK]": 1, "[BOS]": 2, "[SEP]": 3, "[EOS]": 4}
    vocab.update({f"w{i}": 5 + i for i in range(59)})
    tok = Tokenizer(models.WordLevel(vocab, unk_token="[UNK]"))
    tok.pre_tokenizer = pre_tokenizers.Whitespace()
    fast = PreTrainedTokenizerFast(
        tokenizer_object=tok, pad_token="[PAD]", unk_token="[UNK]",
        bos_token="[BOS]", sep_token="[SEP]", eos_token="[EOS]")
    fast.save_pretrained(path)

    torch.manual_seed(20240817)
    config = GPT2Config(vocab_size=len(vocab), n_positions=128, n_embd=32,
                        n_layer=2, n_head=2, bos_token_id=2, eos_token_id=4,
                        pad_token_id=0)
    GPT2LMHeadModel(config).save_pretrained(path)
    return path


@pytest.fixture(scope="session")
def dataset_path(tmp_path_factory):
    """Eight instruction samples over the tiny vocabulary."""
    path = tmp_path_factory.mktemp("data") / "samples.jsonl"
    rows = []
    for i in range(8):
        words = [f"w{(i * 7 + k) % 59}" for k in range(4 + i)]
        resp = [f"w{(i * 11 + k) % 59}" for k in range(3 + i % 4)]
        rows.append({
            "id": f"sample-{i:02d}",
            "prompt": " ".join(words),
            "response": " ".join(resp) if i != 5 else None,
            "source": ["cot", "flan", "dolly"][i % 3],
        })
    path.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    return path


def pytest_runtest_logreport(report):
    if "test_extractor_acceptance" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        status = "PASS" if report.passed else "FAIL"
        name = report.nodeid.split("::", 1)[-1]
        sys.stderr.write(f"ACCEPTANCE {name}: {status}\n")
