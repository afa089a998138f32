"""Small fusion transformer standing in for the language model.

One transformer serves two tasks, selected by a task token:

* generation conditioning: ``[reference tokens; GEN; raymap queries]`` -> features read
  off at the query positions;
* spatial VQA: ``[image tokens; VQA; question; SEP; answer...]`` with a prefix-LM mask,
  trained by teacher-forced cross-entropy and decoded greedily.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ValidationError
from .geometry import ScenePair, camera_offset_in_reference
from .layers import Block

PAD, BOS, EOS, SEP = 0, 1, 2, 3
GEN_TASK, VQA_TASK = 0, 1

WORDS = [
    "<pad>", "<bos>", "<eos>", "<sep>",
    "is", "the", "second", "view", "left", "or", "right", "of", "first", "?", "above", "below",
    "how", "many", "boxes", "are", "there", "it", "zero", "one", "two", "three", "four", "five",
    "six", "seven", "eight", "nine", "box", "closer", "than", "yes", "no", "which", "camera",
    "moved", "forward", "backward", "to", "a", "an", "scene", "has", "in", "front", "behind",
    "wall", "floor", "near", "far", "and", "up", "down", "what", "side", "on", "this", "that",
    "image", "<unk>",
]
NUMBER_WORDS = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"]


class Vocabulary:
    def __init__(self, words: list[str] = WORDS):
        self.words = list(words)
        self.index = {w: k for k, w in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        unk = self.index["<unk>"]
        return [self.index.get(w, unk) for w in text.split()]

    def decode(self, ids) -> str:
        return " ".join(self.words[i] for i in ids)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({str(k): w for k, w in enumerate(self.words)}, indent=1))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        table = json.loads(Path(path).read_text())
        return cls([table[str(k)] for k in range(len(table))])


VOCAB = Vocabulary()


@dataclass(frozen=True)
class ConditionerConfig:
    token_dim: int = 128
    dim: int = 128
    depth: int = 2
    heads: int = 4
    vocab_size: int = len(WORDS)
    max_text: int = 32
    grid: int = 8

    @property
    def n_queries(self) -> int:
        return self.grid * self.grid


class Conditioner(nn.Module):
    def __init__(self, cfg: ConditionerConfig = ConditionerConfig()):
        super().__init__()
        self.cfg = cfg
        n = cfg.grid * cfg.grid
        self.ref_proj = nn.Sequential(nn.Linear(cfg.token_dim, cfg.dim), nn.GELU(), nn.Linear(cfg.dim, cfg.dim))
        self.ref_pos = nn.Parameter(torch.randn(1, n, cfg.dim) * 0.02)
        self.ray_mlp = nn.Sequential(nn.Linear(6, cfg.dim), nn.GELU(), nn.Linear(cfg.dim, cfg.dim))
        self.query_pos = nn.Parameter(torch.randn(1, cfg.n_queries, cfg.dim) * 0.02)
        self.task_embed = nn.Embedding(2, cfg.dim)
        self.tok_embed = nn.Embedding(cfg.vocab_size, cfg.dim)
        self.text_pos = nn.Parameter(torch.randn(1, cfg.max_text, cfg.dim) * 0.02)
        self.blocks = nn.ModuleList(Block(cfg.dim, cfg.heads) for _ in range(cfg.depth))
        self.norm = nn.LayerNorm(cfg.dim)
        self.lm_head = nn.Linear(cfg.dim, cfg.vocab_size)

    # -- shared pieces -----------------------------------------------------------------

    def embed_reference(self, z: torch.Tensor) -> torch.Tensor:
        """(B, H_t, W_t, d) -> (B, N, d_c) reference sequence with positions added."""
        return self.ref_proj(z.flatten(1, 2)) + self.ref_pos

    def fuse(self, ref_seq: torch.Tensor, task: int, rest: torch.Tensor, mask=None) -> torch.Tensor:
        """Run the transformer over ``[ref_seq; task token; rest]``; returns hidden states of ``rest``."""
        b = ref_seq.shape[0]
        task_tok = self.task_embed.weight[task].expand(b, 1, -1)
        x = torch.cat([ref_seq, task_tok, rest], dim=1)
        for blk in self.blocks:
            x = blk(x, mask=mask)
        return self.norm(x)[:, ref_seq.shape[1] + 1:]

    # -- generation conditioning ---------------------------------------------------------

    def raymap_to_queries(self, raymap: torch.Tensor) -> torch.Tensor:
        """(B, H_t, W_t, 6) Plücker raymap -> (B, N_q, d_c) queries."""
        return self.ray_mlp(raymap.flatten(1, 2))

    def condition(self, z_ref: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
        """Conditional features at the query positions, (B, N_q, d_c)."""
        return self.fuse(self.embed_reference(z_ref), GEN_TASK, queries + self.query_pos)

    # -- VQA -----------------------------------------------------------------------------

    def _text_inputs(self, questions, answers_in):
        """Right-padded text ids, per-item prefix lengths and text lengths."""
        seqs = [list(q) + [SEP] + list(a) for q, a in zip(questions, answers_in)]
        length = max(len(s) for s in seqs)
        if length > self.cfg.max_text:
            raise ValidationError(f"text of {length} tokens exceeds max_text={self.cfg.max_text}")
        ids = torch.full((len(seqs), length), PAD, dtype=torch.long)
        for k, s in enumerate(seqs):
            ids[k, :len(s)] = torch.as_tensor(s, dtype=torch.long)
        return ids, [len(q) for q in questions], [len(s) for s in seqs]

    def _vqa_mask(self, n_img: int, prefix_lens, text_lens, length: int) -> torch.Tensor:
        """Prefix-LM mask: image/task/question tokens see each other; answer tokens are causal."""
        size = n_img + 1 + length
        masks = []
        for q_len, t_len in zip(prefix_lens, text_lens):
            prefix = n_img + 1 + q_len
            end = n_img + 1 + t_len
            key = torch.arange(size)
            query = torch.arange(size)[:, None]
            allowed = (key < prefix) | ((key < end) & (key <= query))
            allowed &= (query >= prefix) | (key < prefix)
            masks.append(allowed)
        return torch.stack(masks)[:, None]

    def vqa_logits(self, z: torch.Tensor, questions, answers_in) -> tuple[torch.Tensor, list[int]]:
        """Logits for every text position; ``answers_in`` are the teacher-forced answer prefixes."""
        for seq in list(questions) + list(answers_in):
            for i in seq:
                if not 0 <= int(i) < self.cfg.vocab_size:
                    raise ValidationError(f"token id {i} outside vocabulary of {self.cfg.vocab_size}")
        ids, prefix_lens, text_lens = self._text_inputs(questions, answers_in)
        length = ids.shape[1]
        text = self.tok_embed(ids) + self.text_pos[:, :length]
        ref = self.embed_reference(z)
        mask = self._vqa_mask(ref.shape[1], prefix_lens, text_lens, length)
        hidden = self.fuse(ref, VQA_TASK, text, mask)
        return self.lm_head(hidden), prefix_lens

    def vqa_loss(self, z: torch.Tensor, questions, answers) -> torch.Tensor:
        """Mean negative log-likelihood of the answer tokens under teacher forcing."""
        if any(len(a) == 0 for a in answers):
            raise ValidationError("answers must be non-empty")
        for a in answers:
            for i in a:
                if not 0 <= int(i) < self.cfg.vocab_size:
                    raise ValidationError(f"token id {i} outside vocabulary of {self.cfg.vocab_size}")
        logits, prefix_lens = self.vqa_logits(z, questions, [a[:-1] for a in answers])
        picked, targets = [], []
        for k, (q_len, a) in enumerate(zip(prefix_lens, answers)):
            # the SEP token (index q_len) predicts a[0]; answer token m predicts a[m + 1]
            picked.append(logits[k, q_len:q_len + len(a)])
            targets.append(torch.as_tensor(list(a), dtype=torch.long))
        return F.cross_entropy(torch.cat(picked), torch.cat(targets))

    @torch.no_grad()
    def vqa_generate(self, z: torch.Tensor, question, max_len: int = 8) -> list[int]:
        """Greedy decoding for a single (1, H_t, W_t, d) grid; stops at EOS (not returned)."""
        if len(question) == 0:
            raise ValidationError("question must be non-empty")
        out: list[int] = []
        for _ in range(max_len):
            logits, prefix_lens = self.vqa_logits(z, [question], [out])
            nxt = int(logits[0, prefix_lens[0] + len(out)].argmax())
            if nxt == EOS:
                break
            out.append(nxt)
        return out


# ---------------------------------------------------------------------------
# templated spatial QA


def _box_centers_in_reference(pair: ScenePair) -> np.ndarray:
    if not pair.boxes:
        return np.zeros((0, 3))
    centers = np.array([0.5 * (np.asarray(b["lo"]) + np.asarray(b["hi"])) for b in pair.boxes])
    return pair.pose_i.apply(centers)


def qa_templates(pair: ScenePair) -> list[tuple[str, str]]:
    """Question/answer strings answerable from the pair's ground truth."""
    offset = camera_offset_in_reference(pair)
    out = [
        ("is the second view left or right of the first ?", "it is " + ("right" if offset[0] > 0 else "left")),
        ("is the second view above or below the first ?", "it is " + ("below" if offset[1] > 0 else "above")),
        ("how many boxes are there ?", f"there are {NUMBER_WORDS[min(len(pair.boxes), 9)]} boxes"),
        ("is the second view in front or behind the first ?", "it is " + ("in front" if offset[2] > 0 else "behind")),
    ]
    centers = _box_centers_in_reference(pair)
    if len(centers) >= 2:
        left, right = centers[np.argmin(centers[:, 0])], centers[np.argmax(centers[:, 0])]
        out.append(("is the left box closer than the right box ?", "yes" if left[2] < right[2] else "no"))
    return out


@dataclass(frozen=True)
class QAItem:
    seed: int
    question_ids: tuple[int, ...]
    answer_ids: tuple[int, ...]  # ends with EOS

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "question_ids": list(self.question_ids),
                           "answer_ids": list(self.answer_ids)})

    @classmethod
    def from_json(cls, line: str) -> "QAItem":
        d = json.loads(line)
        return cls(int(d["seed"]), tuple(d["question_ids"]), tuple(d["answer_ids"]))


def build_qa_items(pairs: list[ScenePair], vocab: Vocabulary = VOCAB, per_pair: int = 1) -> list[QAItem]:
    """``per_pair`` templated questions per scene, rotating through the templates by scene index."""
    items = []
    for k, pair in enumerate(pairs):
        templates = qa_templates(pair)
        for m in range(per_pair):
            q, a = templates[(k + m) % len(templates)]
            items.append(QAItem(pair.seed, tuple(vocab.encode(q)), tuple(vocab.encode(a)) + (EOS,)))
    return items


def save_qa(items: list[QAItem], path) -> None:
    Path(path).write_text("".join(item.to_json() + "\n" for item in items))


def load_qa(path) -> list[QAItem]:
    return [QAItem.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]
