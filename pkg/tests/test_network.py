"""Architecture contracts: permutation equivariance of the encoder,
causality of the AT decoder, the NAT decoder's token-free signature, the
augmented cross-attention context, and checkpoint round trips."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from pepseq import autodiff as ad
from pepseq.network import MAX_CHARGE, Model, ModelConfig, prefix_suffix_masses
from pepseq.params import (
    BadMagicError,
    ParameterStore,
    TruncatedCheckpointError,
    UnknownPartitionError,
    VersionMismatchError,
    load_checkpoint,
    save_checkpoint,
)
from pepseq.spectra import PROTON, WATER, AminoAcidTable, Peptide, Spectrum, simulate_spectrum


def tiny_config(**kw):
    defaults = dict(d=16, heads=2, hidden=32, enc_layers=2, at_layers=2,
                    nat_layers=2, t_max=12)
    defaults.update(kw)
    return ModelConfig(**defaults)


@pytest.fixture
def model():
    return Model.build(tiny_config(), AminoAcidTable(), seed=0)


@pytest.fixture
def spectrum():
    return simulate_spectrum(Peptide.from_string("GASPV"), seed=11)


class TestEncoder:
    def test_output_shape(self, model, spectrum):
        feats = model.encode_spectrum(spectrum)
        assert feats.shape == (len(spectrum.peaks) + 1, model.cfg.d)

    def test_permutation_equivariance(self, model, spectrum):
        precursor, peak_rows = model.spectrum_rows(spectrum)
        k = peak_rows.shape[0]
        rows = ad.concat([precursor, ad.constant(peak_rows)], axis=0)
        out = model.run_encoder(rows).values

        perm = np.random.default_rng(3).permutation(k)
        rows_p = ad.concat([precursor, ad.constant(peak_rows[perm])], axis=0)
        out_p = model.run_encoder(rows_p).values

        assert_allclose(out_p[0], out[0], atol=1e-10)  # precursor row stays put
        assert_allclose(out_p[1:], out[1:][perm], atol=1e-10)

    def test_charge_out_of_range_rejected(self, model, spectrum):
        bad = Spectrum(
            spectrum_id="x",
            peaks=spectrum.peaks,
            precursor_mz=spectrum.precursor_mz,
            charge=MAX_CHARGE + 1,
        )
        with pytest.raises(ValueError, match="charge"):
            model.encode_spectrum(bad)

    def test_max_charge_accepted(self, model, spectrum):
        ok = Spectrum(
            spectrum_id="x",
            peaks=spectrum.peaks,
            precursor_mz=spectrum.precursor_mz,
            charge=MAX_CHARGE,
        )
        feats = model.encode_spectrum(ok)
        assert np.all(np.isfinite(feats.values))

    def test_charge_changes_only_through_embedding(self, model, spectrum):
        # Same peaks and precursor m/z, different charge: row 0 input differs.
        s2 = Spectrum(
            spectrum_id=spectrum.spectrum_id,
            peaks=spectrum.peaks,
            precursor_mz=spectrum.precursor_mz,
            charge=3,
        )
        a = model.encode_spectrum(spectrum).values
        b = model.encode_spectrum(s2).values
        assert not np.allclose(a[0], b[0])


class TestATDecoder:
    def tokens_and_masses(self, model, spectrum, residues):
        table = model.table
        ids = [table.index_of(r) for r in residues]
        tokens = [table.bos_id] + ids
        masses = prefix_suffix_masses(ids, spectrum.neutral_mass, table)
        return tokens, masses

    def test_causality_bit_invariance(self, model, spectrum):
        enc = model.encode_spectrum(spectrum)
        tok1, m1 = self.tokens_and_masses(model, spectrum, "GASP")
        tok2, m2 = self.tokens_and_masses(model, spectrum, "GAKW")
        out1 = model.at_forward(tok1, m1, enc).values
        out2 = model.at_forward(tok2, m2, enc).values
        # Positions 0..2 see only BOS, G, A in both runs: bit-identical.
        assert np.array_equal(out1[:3], out2[:3])
        assert not np.array_equal(out1[3], out2[3])

    def test_logit_shape_covers_at_vocab(self, model, spectrum):
        enc = model.encode_spectrum(spectrum)
        tokens, masses = self.tokens_and_masses(model, spectrum, "GA")
        out = model.at_forward(tokens, masses, enc)
        assert out.shape == (3, model.table.at_vocab_size)

    def test_mass_rows_validated(self, model, spectrum):
        enc = model.encode_spectrum(spectrum)
        tokens, masses = self.tokens_and_masses(model, spectrum, "GA")
        with pytest.raises(ValueError, match="masses"):
            model.at_forward(tokens, masses[:-1], enc)
        with pytest.raises(ValueError, match="vocabulary"):
            model.at_forward([999] + tokens[1:], masses, enc)

    def test_prefix_suffix_masses_by_hand(self, model):
        table = model.table
        ids = [table.index_of("G"), table.index_of("A")]
        neutral = table.peptide_mass(Peptide.from_string("GA"))
        m = prefix_suffix_masses(ids, neutral, table)
        budget = neutral - WATER
        assert_allclose(m[0], [0.0, budget])
        assert_allclose(m[1], [57.02146, budget - 57.02146])
        assert_allclose(m[2], [budget, 0.0], atol=1e-9)

    def test_augmented_context_changes_output(self, model, spectrum):
        enc = model.encode_spectrum(spectrum)
        nat = model.nat_forward(enc)
        tokens, masses = self.tokens_and_masses(model, spectrum, "GA")
        plain = model.at_forward(tokens, masses, enc).values
        augmented = model.at_forward(tokens, masses, enc, nat.latents).values
        assert plain.shape == augmented.shape
        assert not np.allclose(plain, augmented)

    def test_gradient_blocking_protects_nat(self, model, spectrum):
        enc = model.encode_spectrum(spectrum)
        tokens, masses = self.tokens_and_masses(model, spectrum, "GA")
        pos_emb = model.store.get("nat", "pos_emb")

        nat = model.nat_forward(enc)
        out = model.at_forward(tokens, masses, enc, nat.latents, block_nat_grad=True)
        ad.backward(ad.sum_all(out))
        assert pos_emb.grad is None, "blocked NAT latents leaked gradient"
        seg = model.store.get("at", "seg_nat")
        assert seg.grad is not None and np.any(seg.grad != 0)

        model.store.zero_grads()
        nat = model.nat_forward(enc)
        out = model.at_forward(tokens, masses, enc, nat.latents, block_nat_grad=False)
        ad.backward(ad.sum_all(out))
        assert pos_emb.grad is not None and np.any(pos_emb.grad != 0), (
            "without blocking, gradients must reach the NAT stack"
        )

    def test_context_length_is_tmax_plus_k_plus_1(self, model, spectrum):
        # Indirect check: the augmented forward works for any peak count and
        # fails loudly if the two context pieces disagree in width.
        enc = model.encode_spectrum(spectrum)
        nat = model.nat_forward(enc)
        tokens, masses = self.tokens_and_masses(model, spectrum, "G")
        out = model.at_forward(tokens, masses, enc, nat.latents)
        assert out.shape[0] == 2


class TestNATDecoder:
    def test_signature_admits_no_tokens(self, model, spectrum):
        import inspect

        params = inspect.signature(model.nat_forward).parameters
        assert list(params) == ["enc_features"]

    def test_output_shapes(self, model, spectrum):
        enc = model.encode_spectrum(spectrum)
        nat = model.nat_forward(enc)
        assert nat.latents.shape == (model.cfg.t_max, model.cfg.d)
        assert nat.logits.shape == (model.cfg.t_max, model.table.nat_vocab_size)

    def test_deterministic_given_encoder(self, model, spectrum):
        enc = model.encode_spectrum(spectrum)
        a = model.nat_forward(enc).logits.values
        b = model.nat_forward(enc).logits.values
        assert np.array_equal(a, b)


class TestParameterStore:
    def test_freeze_clears_requires_grad(self):
        store = ParameterStore()
        t = store.add("enc", "w", np.ones(3))
        assert t.requires_grad
        store.freeze("enc")
        assert not t.requires_grad and store.is_frozen("enc")
        store.unfreeze("enc")
        assert t.requires_grad

    def test_duplicate_and_unknown_partition_rejected(self):
        store = ParameterStore()
        store.add("at", "w", np.ones(2))
        with pytest.raises(ValueError):
            store.add("at", "w", np.ones(2))
        with pytest.raises(UnknownPartitionError):
            store.add("decoder", "w", np.ones(2))

    def test_adding_to_frozen_partition_stays_frozen(self):
        store = ParameterStore()
        store.freeze("nat")
        t = store.add("nat", "w", np.ones(2))
        assert not t.requires_grad


class TestCheckpoint:
    def build_store(self):
        rng = np.random.default_rng(0)
        store = ParameterStore()
        store.add("enc", "w", rng.normal(size=(3, 4)))
        store.add("at", "emb", rng.normal(size=(5,)))
        store.add("nat", "scalar", np.asarray(rng.normal()))
        return store

    def test_bit_exact_roundtrip(self, tmp_path):
        store = self.build_store()
        store.freeze("nat")
        blob = {"model": tiny_config().to_dict(), "vocabulary": AminoAcidTable().to_dict()}
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(str(p1), store, blob)
        loaded, meta = load_checkpoint(str(p1))
        save_checkpoint(str(p2), loaded, {k: v for k, v in meta.items() if k != "frozen"})
        assert p1.read_bytes() == p2.read_bytes()
        for (k1, t1), (k2, t2) in zip(store.items(), loaded.items()):
            assert k1 == k2
            assert np.array_equal(t1.values, t2.values)
        assert loaded.is_frozen("nat") and not loaded.is_frozen("enc")
        assert meta["model"] == tiny_config().to_dict()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.ckpt"
        p.write_bytes(b"XXXX" + b"\x00" * 16)
        with pytest.raises(BadMagicError):
            load_checkpoint(str(p))

    def test_version_mismatch(self, tmp_path):
        p = tmp_path / "x.ckpt"
        save_checkpoint(str(p), self.build_store(), {})
        data = bytearray(p.read_bytes())
        data[4] = 99
        p.write_bytes(bytes(data))
        with pytest.raises(VersionMismatchError):
            load_checkpoint(str(p))

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "x.ckpt"
        save_checkpoint(str(p), self.build_store(), {})
        data = p.read_bytes()
        p.write_bytes(data[: len(data) - 30])
        with pytest.raises(TruncatedCheckpointError):
            load_checkpoint(str(p))

    def test_unknown_partition(self, tmp_path):
        import struct

        p = tmp_path / "x.ckpt"
        name = b"mystery/w"
        payload = (
            b"NVCK"
            + struct.pack("<II", 1, 1)
            + struct.pack("<H", len(name))
            + name
            + struct.pack("<B", 1)
            + struct.pack("<I", 2)
            + np.zeros(2).tobytes()
            + struct.pack("<I", 2)
            + b"{}"
        )
        p.write_bytes(payload)
        with pytest.raises(UnknownPartitionError):
            load_checkpoint(str(p))

    def test_model_roundtrip_through_checkpoint(self, tmp_path, model, spectrum):
        path = tmp_path / "m.ckpt"
        save_checkpoint(str(path), model.store, model.metadata())
        store, blob = load_checkpoint(str(path))
        again = Model.from_checkpoint_blob(store, blob)
        a = again.encode_spectrum(spectrum).values
        b = model.encode_spectrum(spectrum).values
        assert np.array_equal(a, b)
