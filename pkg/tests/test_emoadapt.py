"""
Test module for the emotional adaptation modules: mapper, prompts, EDN and EAM.

Run with: python -m unittest tests.test_emoadapt
"""

import unittest

import torch

from tests.common import random_basis, random_window_batch, tiny_a2et, tiny_adapt
from eatlab.core import emoadapt
from eatlab.core.a2et import A2etModel
from eatlab.core.emoadapt import (
    EAM_BOUND,
    EamBank,
    EdnModel,
    EmotionAdapter,
    FreeHead,
    adapted_forward,
    eam_apply,
    eam_params,
    eam_sites,
    freeze,
    gate_summary,
    guidance_token_count,
    inject_prompts,
    map_guidance,
    sample_latent,
)
from eatlab.core.objectives import latent_loss
from eatlab.errors import AlignmentError, ConfigError, UnknownEmotionError, UnknownSiteError, UsageError
from eatlab.models.config import EMOTIONS


class TestNeutrality(unittest.TestCase):
    """Test cases for the zero-initialised adapter."""

    def setUp(self):
        """Set up test fixtures before each test method."""
        torch.manual_seed(0)
        self.a2et = tiny_a2et()
        self.backbone = freeze(A2etModel(self.a2et, random_basis())).eval()
        self.batch = random_window_batch(self.a2et, size=4)
        self.emotions = ["happy", "sad", "angry", "neutral"]

    def _adapter(self, **overrides):
        return EmotionAdapter(tiny_adapt(**overrides), self.a2et, self.backbone).eval()

    def test_fresh_adapter_is_neutral(self):
        """Test that every component starts as an exact no-op on the backbone output."""
        for site in ("encoder", "decoder", "both"):
            for depth in ("shallow", "deep"):
                adapter = self._adapter(prompt_site=site, prompt_depth=depth)
                z = torch.randn(4, adapter.config.latent_dim)
                with torch.no_grad():
                    out = adapted_forward(self.backbone, adapter, self.batch, z, self.emotions)
                    pe, expr = self.backbone(self.batch)
                torch.testing.assert_close(out.pe, pe, rtol=0.0, atol=1e-6)
                torch.testing.assert_close(out.expr_emotional, expr, rtol=0.0, atol=1e-6)
                self.assertEqual(float(out.delta.abs().max()), 0.0, "EDN output is not zero")

    def test_keypoints_compose_pose(self):
        """Test that the adapted keypoints are R Kc + T + E'."""
        adapter = self._adapter()
        z = torch.zeros(4, adapter.config.latent_dim)
        with torch.no_grad():
            out = adapted_forward(self.backbone, adapter, self.batch, z, self.emotions)
        rotation, translation = emoadapt.latent3d.split_pose_vector_t(self.batch.pose_center)
        expected = emoadapt.latent3d.compose_keypoints_t(self.batch.canonical, rotation, translation,
                                                         out.expr_emotional)
        torch.testing.assert_close(out.keypoints, expected)

    def test_guidance_reaches_backbone_once_trained(self):
        """Test that opening the gates makes the emotion label matter."""
        adapter = self._adapter(prompt_depth="deep", use_edn=False, use_eam=False)
        with torch.no_grad():
            for gate in adapter.enc_gates:
                gate.fill_(1.0)
            for head in adapter.mapper.heads.values():
                for p in head.parameters():
                    p.normal_(0.0, 0.5)
        z = torch.zeros(4, adapter.config.latent_dim)
        with torch.no_grad():
            happy = adapted_forward(self.backbone, adapter, self.batch, z, ["happy"] * 4).pe
            sad = adapted_forward(self.backbone, adapter, self.batch, z, ["sad"] * 4).pe
        self.assertGreater(float((happy - sad).abs().max()), 0.0)

    def test_backbone_without_basis(self):
        """Test that adaptation refuses a backbone without a PCA basis."""
        backbone = A2etModel(self.a2et)
        adapter = EmotionAdapter(tiny_adapt(), self.a2et, backbone)
        with self.assertRaises(UsageError):
            adapted_forward(backbone, adapter, self.batch, torch.zeros(4, 4), self.emotions)

    def test_no_prompt_gates_for_none(self):
        """Test that prompt_depth='none' builds no gates and refuses prompt injection."""
        adapter = self._adapter(prompt_depth="none")
        self.assertIsNone(adapter.enc_gates)
        guidance = map_guidance(adapter, torch.zeros(adapter.config.latent_dim), "happy")
        with self.assertRaises(UsageError):
            inject_prompts(adapter, guidance, depth="deep")
        self.assertIsNone(inject_prompts(adapter, guidance).enc_prompts)

    def test_gate_summary(self):
        """Test that fresh gates report zero opening."""
        adapter = self._adapter(prompt_site="both")
        self.assertEqual(gate_summary(adapter), {"encoder": 0.0, "decoder": 0.0})


class TestPrompts(unittest.TestCase):
    """Test cases for prompt injection depth and isolation."""

    def setUp(self):
        """Set up test fixtures before each test method."""
        torch.manual_seed(2)
        self.a2et = tiny_a2et()
        self.backbone = freeze(A2etModel(self.a2et, random_basis())).eval()
        self.batch = random_window_batch(self.a2et, size=2, seed=3)
        self.emotions = ["happy", "sad"]

    def _open_adapter(self, **overrides):
        adapter = EmotionAdapter(tiny_adapt(**overrides), self.a2et, self.backbone).eval()
        with torch.no_grad():
            for gates in (adapter.enc_gates, adapter.dec_gates):
                for gate in gates or []:
                    gate.fill_(1.0)
            for head in adapter.mapper.heads.values():
                for p in head.parameters():
                    p.normal_(0.0, 0.5)
        return adapter

    def _guidance(self, adapter):
        return adapter.guidance(torch.randn(2, adapter.config.latent_dim), self.emotions)

    def _record_encoder_attention(self):
        seen = []

        def record(module, args):
            query, prompt = args[0], args[1]
            seen.append((query.shape[1], None if prompt is None else prompt.shape[1]))

        handles = [layer.attn.register_forward_pre_hook(record) for layer in self.backbone.encoder]
        return seen, handles

    def test_one_prompt_token_per_layer(self):
        """Test that shallow and deep prompting add exactly one key/value token per layer."""
        for depth in ("shallow", "deep"):
            adapter = self._open_adapter(prompt_site="encoder", prompt_depth=depth)
            seen, handles = self._record_encoder_attention()
            try:
                with torch.no_grad():
                    adapted_forward(self.backbone, adapter, self.batch, torch.zeros(2, 4), self.emotions)
            finally:
                for handle in handles:
                    handle.remove()
            self.assertEqual(seen, [(self.a2et.window + 1, 1)] * self.a2et.layers_enc, depth)

    def test_shallow_uses_first_token_only(self):
        """Test that shallow prompting reads e1 alone while deep prompting reads every layer token."""
        for depth, later_tokens_matter in (("shallow", False), ("deep", True)):
            adapter = self._open_adapter(prompt_site="encoder", prompt_depth=depth)
            with torch.no_grad():
                hooks = inject_prompts(adapter, self._guidance(adapter))
                before = self.backbone(self.batch, hooks)[0]
                hooks.enc_prompts = [hooks.enc_prompts[0]] + [torch.randn_like(p) * 3.0
                                                              for p in hooks.enc_prompts[1:]]
                after = self.backbone(self.batch, hooks)[0]
            changed = float((after - before).abs().max()) > 1e-6
            self.assertEqual(changed, later_tokens_matter, depth)

    def test_first_token_drives_shallow(self):
        """Test that the injected e1 does reach the shallow-prompted output."""
        adapter = self._open_adapter(prompt_site="encoder", prompt_depth="shallow")
        with torch.no_grad():
            hooks = inject_prompts(adapter, self._guidance(adapter))
            before = self.backbone(self.batch, hooks)[0]
            hooks.enc_prompts = [torch.randn_like(hooks.enc_prompts[0]) * 3.0] + hooks.enc_prompts[1:]
            after = self.backbone(self.batch, hooks)[0]
        self.assertGreater(float((after - before).abs().max()), 1e-6)

    def test_final_prompt_state_is_discarded(self):
        """Test that prompt outputs of the last layers never reach the predicted code."""
        adapter = self._open_adapter(prompt_site="both", prompt_depth="shallow")
        z = torch.zeros(2, 4)
        with torch.no_grad():
            reference = adapted_forward(self.backbone, adapter, self.batch, z, self.emotions).pe

        def scramble(module, args, output):
            x, prompt_out = output
            self.assertIsNotNone(prompt_out)
            return x, torch.randn_like(prompt_out) * 100.0

        handles = [self.backbone.encoder[-1].register_forward_hook(scramble),
                   self.backbone.decoder[-1].register_forward_hook(scramble)]
        try:
            with torch.no_grad():
                scrambled = adapted_forward(self.backbone, adapter, self.batch, z, self.emotions).pe
        finally:
            for handle in handles:
                handle.remove()
        torch.testing.assert_close(scrambled, reference, rtol=0.0, atol=0.0)

    def test_prompts_keep_sequence_lengths(self):
        """Test that prompted encoder memory and decoder features keep their prompt-free lengths."""
        adapter = self._open_adapter(prompt_site="both", prompt_depth="deep")
        with torch.no_grad():
            hooks = inject_prompts(adapter, self._guidance(adapter))
            memory = self.backbone.encode(self.backbone.speech_tokens(self.batch),
                                          self.backbone.pose_token_of(self.batch), hooks)
            features = self.backbone.decode(self.backbone.acoustic_tokens(self.batch, hooks),
                                            self.backbone.source_token(self.batch.canonical,
                                                                       self.batch.appearance, hooks),
                                            memory, hooks)
        self.assertEqual(tuple(memory.shape), (2, self.a2et.window + 1, self.a2et.token_dim))
        self.assertEqual(tuple(features.shape), (2, self.a2et.window, self.a2et.token_dim))


class TestAdaptedGradients(unittest.TestCase):
    """Test cases for gradients through the full adapted path."""

    def test_gradients_match_finite_differences(self):
        """Test analytic gradients of the keypoint loss against central differences in double precision."""
        torch.manual_seed(6)
        a2et = tiny_a2et()
        backbone = A2etModel(a2et, random_basis())
        adapter = EmotionAdapter(tiny_adapt(prompt_site="both", prompt_depth="deep"), a2et, backbone)
        backbone.double().eval()
        adapter.double().eval()
        with torch.no_grad():
            for gate in list(adapter.enc_gates) + list(adapter.dec_gates):
                gate.uniform_(-1.0, 1.0)
            for net in adapter.eam.nets.values():
                net[2].weight.normal_(0.0, 0.3)
            adapter.edn.head[2].weight.normal_(0.0, 0.3)
        batch = random_window_batch(a2et, size=2, seed=5, dtype=torch.float64)
        z = torch.randn(2, adapter.config.latent_dim, dtype=torch.float64)
        target = torch.randn(2, 15, 3, dtype=torch.float64) * 0.1
        emotions = ["happy", "sad"]

        def loss():
            out = adapted_forward(backbone, adapter, batch, z, emotions)
            return latent_loss(None, None, out.keypoints, target, edn_mode=True)

        loss().backward()

        gen = torch.Generator().manual_seed(7)
        picks = []
        for params in (list(backbone.parameters()), list(adapter.parameters())):
            for _ in range(10):
                p = params[int(torch.randint(len(params), (1,), generator=gen))]
                picks.append((p, int(torch.randint(p.numel(), (1,), generator=gen))))

        step = 1e-4
        for p, i in picks:
            analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[i])
            flat = p.data.view(-1)
            original = float(flat[i])
            with torch.no_grad():
                flat[i] = original + step
                up = float(loss())
                flat[i] = original - step
                down = float(loss())
                flat[i] = original
            numeric = (up - down) / (2 * step)
            tolerance = 1e-3 * max(abs(analytic), abs(numeric)) + 1e-7
            self.assertLessEqual(abs(analytic - numeric), tolerance,
                                 f"shape {tuple(p.shape)} index {i}: {analytic} vs {numeric}")


class TestMapper(unittest.TestCase):
    """Test cases for the emotion mapper and the free head."""

    def setUp(self):
        """Set up test fixtures before each test method."""
        torch.manual_seed(2)
        self.a2et = tiny_a2et()
        self.adapter = EmotionAdapter(tiny_adapt(edn_init="random"), self.a2et)

    def test_guidance_shape(self):
        """Test that guidance holds one token per layer plus e0."""
        guidance = self.adapter.guidance(torch.randn(3, 4), ["happy", "sad", "happy"])
        self.assertEqual(tuple(guidance.tokens.shape), (3, guidance_token_count(self.a2et), self.a2et.token_dim))
        self.assertEqual(tuple(guidance.e0.shape), (3, self.a2et.token_dim))

    def test_one_head_per_emotion(self):
        """Test that the mapper has an unshared head for every emotion."""
        self.assertEqual(sorted(self.adapter.mapper.heads), sorted(EMOTIONS))

    def test_rows_use_their_own_head(self):
        """Test that each row is mapped by the head of its label."""
        z = torch.randn(2, 4)
        mixed = self.adapter.guidance(z, ["happy", "sad"]).tokens
        happy = self.adapter.guidance(z[:1], ["happy"]).tokens
        sad = self.adapter.guidance(z[1:], ["sad"]).tokens
        torch.testing.assert_close(mixed[0], happy[0])
        torch.testing.assert_close(mixed[1], sad[0])

    def test_unknown_emotion(self):
        """Test that an unknown label raises UnknownEmotionError."""
        with self.assertRaises(UnknownEmotionError):
            self.adapter.guidance(torch.randn(1, 4), ["bored"])
        with self.assertRaises(UnknownEmotionError):
            map_guidance(self.adapter, torch.randn(4), emoadapt.FREE_LABEL)

    def test_label_count_mismatch(self):
        """Test that labels must match the number of codes."""
        with self.assertRaises(AlignmentError):
            self.adapter.guidance(torch.randn(2, 4), ["happy"])

    def test_free_head_from_neutral(self):
        """Test that a neutral-initialised free head reproduces the neutral head."""
        head = FreeHead(self.adapter.mapper, "neutral")
        z = torch.randn(2, 4)
        free = self.adapter.guidance(z, [], head=head)
        neutral = self.adapter.guidance(z, ["neutral", "neutral"])
        torch.testing.assert_close(free.tokens, neutral.tokens)
        self.assertEqual(free.labels, [emoadapt.FREE_LABEL] * 2)

    def test_free_head_bad_init(self):
        """Test that an unknown free head init is refused."""
        with self.assertRaises(ConfigError):
            FreeHead(self.adapter.mapper, "happy")

    def test_sample_latent(self):
        """Test that latent codes are zeros at inference and seeded Gaussians in training."""
        self.assertEqual(float(sample_latent(3, 4, training=False).abs().sum()), 0.0)
        a = sample_latent(3, 4, True, torch.Generator().manual_seed(5))
        b = sample_latent(3, 4, True, torch.Generator().manual_seed(5))
        torch.testing.assert_close(a, b)


class TestEam(unittest.TestCase):
    """Test cases for the emotion-aware modulation bank."""

    def setUp(self):
        """Set up test fixtures before each test method."""
        torch.manual_seed(3)
        self.a2et = tiny_a2et()
        self.bank = EamBank(eam_sites(self.a2et), self.a2et.token_dim, 4, debug_bounds=True)

    def test_registered_sites(self):
        """Test the four sites and their channel counts."""
        self.assertEqual(eam_sites(self.a2et), {"a2et.acoustic": 8, "a2et.identity": 16,
                                                "render.splat": 4, "render.shade": 4})

    def test_zero_init(self):
        """Test that a fresh bank produces gamma = beta = 0."""
        gamma, beta = eam_params(self.bank, torch.randn(2, 16), "a2et.acoustic")
        self.assertEqual(float(gamma.abs().max()), 0.0)
        self.assertEqual(float(beta.abs().max()), 0.0)

    def test_bounds_hold_for_huge_weights(self):
        """Test that outputs stay strictly inside (-1, 1) even when tanh saturates."""
        with torch.no_grad():
            for p in self.bank.parameters():
                p.fill_(100.0)
        gamma, beta = eam_params(self.bank, torch.full((2, 16), 50.0), "a2et.identity")
        self.assertLess(float(gamma.abs().max()), 1.0)
        self.assertLess(float(beta.abs().max()), 1.0)
        self.assertLessEqual(float(gamma.abs().max()), EAM_BOUND)

    def test_unknown_site(self):
        """Test that an unregistered site raises UnknownSiteError."""
        with self.assertRaises(UnknownSiteError):
            eam_params(self.bank, torch.zeros(1, 16), "a2et.pose")

    def test_apply_channel_last(self):
        """Test x * (1 + gamma) + beta on the last axis."""
        x = torch.ones(2, 3, 4)
        gamma = torch.tensor([0.5, -0.5, 0.0, 0.25])
        beta = torch.tensor([0.1, 0.0, -0.1, 0.0])
        out = eam_apply(x, gamma, beta)
        torch.testing.assert_close(out[0, 0], torch.tensor([1.6, 0.5, 0.9, 1.25]))

    def test_apply_channel_first_batched(self):
        """Test per-sample parameters applied on the channel axis of images."""
        x = torch.ones(2, 4, 3, 3)
        gamma = torch.zeros(2, 4)
        gamma[1, 2] = 0.5
        out = eam_apply(x, gamma, torch.zeros(2, 4), channel_dim=1)
        self.assertEqual(float(out[0].max()), 1.0)
        self.assertEqual(float(out[1, 2, 0, 0]), 1.5)

    def test_channel_mismatch(self):
        """Test that parameters with the wrong channel count are refused."""
        with self.assertRaises(ConfigError):
            eam_apply(torch.ones(2, 5), torch.zeros(4), torch.zeros(4))


class TestEdn(unittest.TestCase):
    """Test cases for the emotional deformation network."""

    def setUp(self):
        """Set up test fixtures before each test method."""
        torch.manual_seed(4)
        self.a2et = tiny_a2et()
        self.backbone = A2etModel(self.a2et, random_basis())

    def test_init_from_backbone(self):
        """Test that the EDN copies attention and norms of the first backbone encoder layer."""
        edn = EdnModel(self.a2et, tiny_adapt(), self.backbone)
        layer, source = edn.layers[0], self.backbone.encoder[0]
        for part in ("attn", "norm1", "norm2"):
            for (name, a), b in zip(getattr(layer, part).state_dict().items(),
                                    getattr(source, part).state_dict().values()):
                torch.testing.assert_close(a, b, msg=f"{part}.{name} was not copied")
        torch.testing.assert_close(layer.ff.fc2.bias, source.ff.fc2.bias)
        rows = {tuple(r.tolist()) for r in source.ff.fc1.weight}
        self.assertEqual(layer.ff.fc1.out_features, 16)
        self.assertTrue(all(tuple(r.tolist()) in rows for r in layer.ff.fc1.weight))

    def test_full_width_copy_is_exact(self):
        """Test that an EDN as wide and deep as the encoder is an exact copy of it."""
        edn = EdnModel(self.a2et, tiny_adapt(edn_layers=2, edn_ff_dim=self.a2et.ff_dim), self.backbone)
        for (name, a), b in zip(edn.layers.state_dict().items(), self.backbone.encoder.state_dict().values()):
            torch.testing.assert_close(a, b, msg=f"{name} was not copied")

    def test_larger_than_backbone(self):
        """Test that an EDN deeper or wider than the encoder cannot be copied from it."""
        with self.assertRaises(ConfigError):
            EdnModel(self.a2et, tiny_adapt(edn_layers=3), self.backbone)
        with self.assertRaises(ConfigError):
            EdnModel(self.a2et, tiny_adapt(edn_ff_dim=64), self.backbone)
        EdnModel(self.a2et, tiny_adapt(edn_layers=3, edn_ff_dim=64, edn_init="random"))

    def test_a2et_init_needs_backbone(self):
        """Test that edn_init='a2et' without a backbone fails."""
        with self.assertRaises(ConfigError):
            EdnModel(self.a2et, tiny_adapt(edn_init="a2et"))

    def test_every_parameter_trains(self):
        """Test that the copied layers train along with the head."""
        adapter = EmotionAdapter(tiny_adapt(), self.a2et, self.backbone)
        edn_params = adapter.parameter_groups()["edn"]
        self.assertEqual(sum(p.numel() for p in edn_params), sum(p.numel() for p in adapter.edn.parameters()))
        self.assertTrue(all(p.requires_grad for p in adapter.edn.parameters()))
        trainable = {id(p) for p in adapter.trainable_parameters()}
        self.assertIn(id(adapter.edn.layers[0].attn.qkv.weight), trainable)
        self.assertIn(id(adapter.edn.layers[0].ff.fc1.weight), trainable)

    def test_output_shape(self):
        """Test that the EDN returns one (15, 3) deformation per sample."""
        edn = EdnModel(self.a2et, tiny_adapt(edn_init="random"))
        out = edn(torch.randn(2, 16), torch.randn(2, guidance_token_count(self.a2et), 16))
        self.assertEqual(tuple(out.shape), (2, 15, 3))

    def test_parameter_groups(self):
        """Test that groups honour the component toggles."""
        adapter = EmotionAdapter(tiny_adapt(), self.a2et, self.backbone)
        groups = adapter.parameter_groups()
        self.assertTrue(all(p.requires_grad for p in groups["edn"]))
        self.assertGreater(len(groups["eam"]), 0)
        bare = EmotionAdapter(tiny_adapt(use_edn=False, use_eam=False), self.a2et)
        self.assertEqual(bare.parameter_groups()["edn"], [])
        self.assertEqual(bare.parameter_groups()["eam"], [])
        self.assertIsNone(bare.render_modulator(bare.guidance(torch.zeros(1, 4), ["happy"])))


if __name__ == "__main__":
    unittest.main()
