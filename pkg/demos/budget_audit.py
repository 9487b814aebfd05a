"""
Trainable-parameter budgets on a ViT-B segmenter layout
=======================================================

Counts what each tuning plan would train, without building any weights.
"""

from sackit import audit_budget, make_plan, sam_vit_b_spec
from sackit.selection import format_budget_table, humanize_count

spec = sam_vit_b_spec()
print(f"{spec.name}: {spec.total:,} parameters in {len(spec.groups)} groups")

# %%
# Norm-only touches every scale and shift vector and nothing else.
norm = audit_budget(spec, make_plan("norm_only"))
print(f"norm_only trains {norm.trainable_count:,} ({norm.percent:.4f}%)")

# %%
# LoRA budgets grow linearly in rank and in the number of adapted blocks.
for rank in (4, 8, 16):
    plan = make_plan("lora", rank=rank, targets=("attention-qkv",), last_k_blocks=4)
    print(f"  qkv, last 4 blocks, r={rank:<2}  {humanize_count(audit_budget(spec, plan).trainable_count)}")

# %%
rows = [
    ("norm_only", make_plan("norm_only")),
    ("decoder_only", make_plan("decoder_only")),
    ("decoder + prompt encoder", make_plan("decoder_only", include_prompt_encoder=True)),
    ("lora qkv last 2, r=8", make_plan("lora", rank=8, targets=("attention-qkv",), last_k_blocks=2)),
    ("composite", make_plan("composite_cracksam")),
    ("full", make_plan("full")),
]
print(format_budget_table([(label, audit_budget(spec, plan)) for label, plan in rows]))
