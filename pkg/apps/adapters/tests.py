import tempfile
from pathlib import Path

import torch
from django.test import SimpleTestCase

from apps.adapters.lora import (
    AdapterSet,
    LoraPair,
    adapted_projection,
    attach_adapters,
    detach_adapters,
    eligible_paths,
    install_adapters,
    merge_adapters,
    unmerge_adapters,
)
from apps.adapters.storage import load_adapter_set, save_adapter_set
from apps.backbone.tests import small_backbone
from apps.backbone.unet import unet_forward
from apps.core.exceptions import AdapterAttachError, AdapterShapeConflictError, PlacementError


def randomize_up(adapter_set, seed=0):
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for path in sorted(adapter_set.placement):
            pair = adapter_set.placement[path]
            pair.up.copy_(torch.randn(pair.up.shape, generator=generator) * 0.05)
    return adapter_set


class LoraPairTestCase(SimpleTestCase):
    def test_rank_one_hand_example(self):
        pair = LoraPair(2, 2, rank=1, alpha=1.0)
        with torch.no_grad():
            pair.down.copy_(torch.tensor([[1.0, 2.0]]))
            pair.up.copy_(torch.tensor([[1.0], [0.0]]))
        self.assertTrue(torch.equal(pair.delta(), torch.tensor([[1.0, 2.0], [0.0, 0.0]])))
        out = adapted_projection(torch.tensor([1.0, 1.0]), torch.zeros(2), pair)
        self.assertTrue(torch.equal(out, torch.tensor([3.0, 0.0])))

    def test_scale_is_alpha_over_rank(self):
        self.assertEqual(LoraPair(8, 8, rank=4, alpha=2.0).scale, 0.5)
        self.assertEqual(LoraPair(8, 8, rank=4).scale, 1.0)

    def test_fresh_pair_has_zero_delta(self):
        pair = LoraPair(6, 5, rank=3, generator=torch.Generator().manual_seed(0))
        self.assertTrue(torch.equal(pair.delta(), torch.zeros(5, 6)))
        self.assertGreater(float(pair.down.abs().sum()), 0.0)

    def test_rank_above_layer_width(self):
        with self.assertRaises(AdapterAttachError):
            LoraPair(4, 4, rank=5)


class PlacementTestCase(SimpleTestCase):
    def setUp(self):
        self.unet = small_backbone().unet

    def test_cross_attention_never_eligible(self):
        for kind in ('spatial', 'temporal'):
            paths = eligible_paths(self.unet, kind)
            self.assertTrue(paths)
            self.assertFalse([path for path in paths if 'attn2' in path])

    def test_kinds_are_disjoint(self):
        spatial = eligible_paths(self.unet, 'spatial')
        temporal = eligible_paths(self.unet, 'temporal')
        self.assertTrue(all('.spatial.' in path for path in spatial))
        self.assertTrue(all('.temporal.' in path for path in temporal))
        self.assertFalse(set(spatial) & set(temporal))

    def test_cross_attention_placement_rejected(self):
        pair = LoraPair(16, 16, rank=2)
        adapter_set = AdapterSet('spatial', {'blocks.down0.spatial.attn2.to_q': pair})
        with self.assertRaises(PlacementError):
            install_adapters(self.unet, adapter_set)

    def test_wrong_shape_rejected(self):
        adapter_set = AdapterSet('spatial', {'blocks.down0.spatial.attn1.to_q': LoraPair(8, 8, rank=2)})
        with self.assertRaises(AdapterShapeConflictError):
            install_adapters(self.unet, adapter_set)

    def test_double_attach(self):
        attach_adapters(self.unet, 'temporal', rank=2)
        with self.assertRaises(AdapterAttachError):
            attach_adapters(self.unet, 'temporal', rank=2)

    def test_detach_unknown_kind(self):
        with self.assertRaises(AdapterAttachError):
            detach_adapters(self.unet, 'spatial')


class AdapterForwardTestCase(SimpleTestCase):
    def setUp(self):
        self.backbone = small_backbone()
        self.z = torch.randn(1, 3, 4, 4, 4, generator=torch.Generator().manual_seed(3))
        self.cond = self.backbone.text_encoder.encode("a blue circle is zigzagging")

    def test_fresh_adapters_leave_output_unchanged(self):
        base = unet_forward(self.backbone.unet, self.z, 50, self.cond, adapters=[])
        attach_adapters(self.backbone.unet, 'spatial', rank=4, generator=torch.Generator().manual_seed(0))
        attach_adapters(self.backbone.unet, 'temporal', rank=4, generator=torch.Generator().manual_seed(1))
        adapted = unet_forward(self.backbone.unet, self.z, 50, self.cond)
        self.assertTrue(torch.equal(base, adapted))

    def test_merged_weights_match_attached_adapters(self):
        unet = self.backbone.unet
        attach_adapters(unet, 'spatial', rank=4, generator=torch.Generator().manual_seed(0))
        attach_adapters(unet, 'temporal', rank=4, generator=torch.Generator().manual_seed(1))
        sets = [randomize_up(detach_adapters(unet, 'spatial'), 0), randomize_up(detach_adapters(unet, 'temporal'), 1)]
        attached = unet_forward(unet, self.z, 50, self.cond, adapters=sets)
        merged = unet_forward(unet, self.z, 50, self.cond, weights=merge_adapters(unet.state_dict(), sets))
        self.assertLess(float((attached - merged).abs().max()), 1e-5)
        base = unet_forward(unet, self.z, 50, self.cond, adapters=[])
        self.assertGreater(float((attached - base).abs().max()), 0.0)

    def test_unmerge_restores_base_weights(self):
        unet = self.backbone.unet
        attach_adapters(unet, 'spatial', rank=4, generator=torch.Generator().manual_seed(0))
        sets = [randomize_up(detach_adapters(unet, 'spatial'))]
        base = unet.state_dict()
        restored = unmerge_adapters(merge_adapters(base, sets), sets)
        for key in base:
            self.assertTrue(torch.allclose(restored[key], base[key], atol=1e-6), key)

    def test_merge_rejects_unknown_layer(self):
        adapter_set = AdapterSet('spatial', {'blocks.nowhere.spatial.attn1.to_q': LoraPair(16, 16, rank=2)})
        with self.assertRaises(PlacementError):
            merge_adapters(self.backbone.unet.state_dict(), [adapter_set])

    def test_base_weights_untouched_by_attach(self):
        before = self.backbone.checksum()
        attach_adapters(self.backbone.unet, 'spatial', rank=4)
        self.assertEqual(self.backbone.checksum(), before)


class AdapterStorageTestCase(SimpleTestCase):
    def test_save_and_load(self):
        unet = small_backbone().unet
        attach_adapters(unet, 'temporal', rank=2, alpha=4.0, generator=torch.Generator().manual_seed(0))
        adapter_set = randomize_up(detach_adapters(unet, 'temporal'))
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'temporal.safetensors'
            save_adapter_set(adapter_set, path)
            loaded = load_adapter_set(path)
        self.assertEqual(loaded.kind, 'temporal')
        self.assertFalse(loaded.trainable)
        self.assertEqual(set(loaded.placement), set(adapter_set.placement))
        for path, pair in adapter_set.placement.items():
            self.assertEqual(loaded.placement[path].scale, 2.0)
            self.assertTrue(torch.equal(loaded.placement[path].delta(), pair.delta()))
