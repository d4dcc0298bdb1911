#!/usr/bin/env python3
"""Generate tiny Hugging Face checkpoints plus reference activations.

Writes tests/data/tiny-llama and tests/data/tiny-qwen2. Each directory holds
config.json, model.safetensors, tokenizer.json and reference.json (token ids,
last-position logits and pre-norm residuals computed by transformers).
"""

import argparse
import json
from pathlib import Path

import torch
from transformers import LlamaConfig, LlamaForCausalLM, Qwen2Config, Qwen2ForCausalLM

MARK = "▁"
COLORS = ["red", "orange", "yellow", "green", "blue", "purple", "pink", "brown", "black", "white", "gray", "gold"]
ANIMALS = ["dog", "cat", "horse", "sheep", "cow", "bear", "zebra", "bird", "elephant", "rabbit", "fox", "giraffe"]
WORDS = ["Q", "A", "What", "is", "the", "color", "of", "animal", "in", "this", "picture"]


def vocabulary(size):
    v = ["<unk>", "<s>", "</s>", "<image>", ".", "?", ":", ",", MARK]
    v += [MARK + c for c in COLORS] + [MARK + a for a in ANIMALS] + [MARK + a.capitalize() for a in ANIMALS]
    v += [MARK + w for w in WORDS]
    i = 0
    while len(v) < size:
        v.append(f"{MARK}w{i}")
        i += 1
    return v


def tokenizer_json(vocab):
    specials = {"<unk>", "<s>", "</s>", "<image>"}
    return {
        "version": "1.0",
        "added_tokens": [{"id": i, "content": p, "special": True} for i, p in enumerate(vocab) if p in specials],
        "model": {"type": "BPE", "vocab": {p: i for i, p in enumerate(vocab)}, "merges": []},
    }


def reference(model, cfg, vision):
    torch.manual_seed(1)
    cases = []
    text = [1, 30, 50, 40, 9, 20, 33, 60, 41, 5]
    seqs = [("text", text, None)]
    if vision:
        n = vision["rows"] * vision["cols"]
        block = torch.randn(n, cfg.hidden_size) * 0.5
        seqs.append(("visual", [1] + [3] * n + text[1:], block))
    for name, ids, block in seqs:
        ids_t = torch.tensor([ids])
        embeds = model.get_input_embeddings()(ids_t)
        if block is not None:
            embeds = embeds.clone()
            embeds[0, 1 : 1 + block.shape[0]] = block
        with torch.no_grad():
            out = model(inputs_embeds=embeds, output_hidden_states=True)
        hs = out.hidden_states
        residual_last = [hs[l][0, -1].tolist() for l in range(cfg.num_hidden_layers)]
        case = {
            "name": name,
            "tokens": ids,
            "logits": out.logits[0, -1].tolist(),
            # hidden_states[l] is the input of layer l; the final entry is post-norm.
            "layer_inputs_last": residual_last,
        }
        if block is not None:
            case["visual_begin"] = 1
            case["visual_block"] = block.tolist()
        cases.append(case)
    return {"cases": cases}


def build(kind, out_dir, seed):
    torch.manual_seed(seed)
    common = dict(
        vocab_size=128,
        hidden_size=64,
        intermediate_size=96,
        num_hidden_layers=2,
        num_attention_heads=4,
        num_key_value_heads=2,
        max_position_embeddings=256,
        rms_norm_eps=1e-6,
        rope_theta=10000.0,
        tie_word_embeddings=False,
        bos_token_id=1,
        eos_token_id=2,
    )
    if kind == "llama":
        cfg = LlamaConfig(**common, attention_bias=False, mlp_bias=False)
        model = LlamaForCausalLM(cfg)
    else:
        cfg = Qwen2Config(**common)
        model = Qwen2ForCausalLM(cfg)
    model.eval()
    # Random init is too small to exercise the norms; widen it.
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("norm.weight"):
                p.uniform_(0.8, 1.2)
            elif name.endswith(".bias"):
                p.normal_(0.0, 0.1)
            else:
                p.normal_(0.0, 1.0 / p.shape[-1] ** 0.5 if p.dim() > 1 else 1.0)
        model.get_input_embeddings().weight.normal_(0.0, 1.0)

    out_dir.mkdir(parents=True, exist_ok=True)
    model.save_pretrained(out_dir, safe_serialization=True)
    vision = {"rows": 2, "cols": 2, "image_size": 32} if kind == "llama" else None
    conf = json.loads((out_dir / "config.json").read_text())
    if vision:
        conf["patchlens_vision"] = vision
    (out_dir / "config.json").write_text(json.dumps(conf, indent=2, sort_keys=True) + "\n")
    gen = out_dir / "generation_config.json"
    if gen.exists():
        gen.unlink()
    (out_dir / "tokenizer.json").write_text(json.dumps(tokenizer_json(vocabulary(128)), indent=1) + "\n")
    (out_dir / "reference.json").write_text(json.dumps(reference(model, cfg, vision)) + "\n")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", type=Path, default=Path(__file__).resolve().parent.parent / "tests" / "data")
    ap.add_argument("--seed", type=int, default=1234)
    args = ap.parse_args()
    build("llama", args.out / "tiny-llama", args.seed)
    build("qwen2", args.out / "tiny-qwen2", args.seed + 1)


if __name__ == "__main__":
    main()
