"""HCSC model: word embeddings, hybrid encoder, CSAA pooling and shared head."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig, derive_seed, rng_for
from .csaa import (AttentionParams, CombineParams, EntityTable, PooledSet, SideParams,
                   UPAParams, pool_document)
from .data import PAD, Batch, Vocabulary
from .encoder import glorot, hybrid_encode, init_encoder_params
from .head import ClassifierHead, multi_vector_loss, softmax

# Dropout layer ids, part of the (seed, step, layer) generator key.
_ENCODER_LAYER = 1
_POOLED_LAYER = 100


class HCSC:
    """All trainable state of one model plus its vocabulary and entity tables."""

    def __init__(self, cfg: RunConfig, vocab: Vocabulary, user_table: EntityTable,
                 prod_table: EntityTable, num_classes: int):
        self.cfg = cfg
        self.vocab = vocab
        self.users = user_table
        self.products = prod_table
        self.num_classes = num_classes
        self.enc_cfg = cfg.encoder_config()
        dim = self.enc_cfg.output_dim
        if user_table.dim != dim or prod_table.dim != dim:
            raise ValueError(f"entity dim must equal the encoder output dim {dim}")
        if vocab.dim != cfg.word_dim:
            raise ValueError(f"vocabulary dim {vocab.dim} != word_dim {cfg.word_dim}")
        att = cfg.attention_dim or dim
        rng = rng_for(cfg.seed, "init")
        self.dropout_seed = derive_seed(cfg.seed, "dropout")

        self.word_embeddings = Tensor(vocab.embeddings.copy(), True, "word.embeddings")
        self.encoder = init_encoder_params(self.enc_cfg, rng)
        self.user_side = SideParams(AttentionParams.init(dim, att, rng, "user.distinct"),
                                    AttentionParams.init(dim, att, rng, "user.shared"),
                                    Tensor(glorot(rng, (dim, dim)), True, "user.W_s"))
        self.prod_side = SideParams(AttentionParams.init(dim, att, rng, "product.distinct"),
                                    AttentionParams.init(dim, att, rng, "product.shared"),
                                    Tensor(glorot(rng, (dim, dim)), True, "product.W_s"))
        self.combine = CombineParams.init(dim, rng)
        self.upa = UPAParams.init(dim, att, rng) if cfg.upa_baseline else None
        self.head = ClassifierHead.init(dim, num_classes, rng)

    @property
    def dim(self) -> int:
        return self.enc_cfg.output_dim

    def named_parameters(self) -> dict[str, Tensor]:
        ps: list[Tensor] = [self.word_embeddings, *self.encoder.values()]
        ps += [self.users.embeddings, self.users.shape_k, self.users.scale_lam]
        ps += [self.products.embeddings, self.products.shape_k, self.products.scale_lam]
        if self.upa is not None:
            ps += self.upa.tensors()
        else:
            ps += self.user_side.tensors() + self.prod_side.tensors()
            ps += [self.combine.weight, self.combine.bias]
        ps += [self.head.weight, self.head.bias]
        return {p.name: p for p in ps}

    def constrained_parameters(self) -> list[Tensor]:
        """Matrices under the max-norm constraint, stored [in, out]."""
        out = []
        if self.cfg.max_norm_head:
            out.append(self.head.weight)
        if self.cfg.max_norm_attention:
            if self.upa is not None:
                out += [self.upa.w_word, self.upa.w_user, self.upa.w_prod]
            else:
                for side in (self.user_side, self.prod_side):
                    for att in (side.distinct, side.shared):
                        out += [att.w_word, att.w_ctx]
        return out

    # ------------------------------------------------------------------
    def encode(self, batch: Batch, train: bool = False, step: int = 0) -> Tensor:
        words = ad.embedding(self.word_embeddings, batch.token_ids)
        enc = hybrid_encode(words, batch.mask, self.encoder, self.enc_cfg)
        if train and self.cfg.dropout_encoder and self.cfg.dropout > 0:
            enc = ad.dropout(enc, self.cfg.dropout, True, ad.dropout_rng(self.dropout_seed, step, _ENCODER_LAYER))
        return enc

    def pool(self, batch: Batch, train: bool = False, step: int = 0) -> PooledSet:
        enc = self.encode(batch, train, step)
        user_idx = self.users.indices(d.user_id for d in batch.documents)
        prod_idx = self.products.indices(d.product_id for d in batch.documents)
        return pool_document(enc, batch.mask, user_idx, prod_idx, self.users, self.products,
                             self.user_side, self.prod_side, self.combine, self.cfg.switches(), self.upa)

    def loss(self, batch: Batch, train: bool = False, step: int = 0, heads=None) -> Tensor:
        pooled = self.pool(batch, train, step)
        transform = None
        if train and self.cfg.dropout_pooled and self.cfg.dropout > 0:
            rate, seed = self.cfg.dropout, self.dropout_seed
            layer_ids = {name: _POOLED_LAYER + i for i, name in enumerate(pooled.vectors())}

            def transform(name, v):
                return ad.dropout(v, rate, True, ad.dropout_rng(seed, step, layer_ids[name]))

        heads = self.cfg.heads if heads is None else heads
        return multi_vector_loss(pooled, batch.labels, self.head, heads, transform)

    def predict_proba(self, batch: Batch) -> np.ndarray:
        with ad.no_tape():
            pooled = self.pool(batch)
            return softmax(self.head.logits(pooled.v_up).values)

    def predict(self, batch: Batch) -> np.ndarray:
        """0-based classes from the v_up head; ties go to the lowest index."""
        return np.argmax(self.predict_proba(batch), axis=1)

    def zero_pad_embedding(self) -> None:
        self.word_embeddings.values[PAD] = 0.0
