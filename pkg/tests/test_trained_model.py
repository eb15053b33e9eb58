"""Properties of the model trained by the default pipeline run."""
import numpy as np

from rgenima import pipeline
from rgenima.genome.dataset import read_records
from rgenima.genome.prompt import build_prompt, permute_gene_blocks, serialize_genome
from rgenima.genome.types import read_genotypes
from rgenima.model.train import encode_record, predict
from rgenima.volume_io import read_roi_table


class TestPermutationAgreement:
    def test_two_block_orders_agree(self, default_run):
        out, _, _ = default_run
        params, mcfg, vocab = pipeline.load_model(out)
        table = read_roi_table(out / "synth" / "roi_table.tsv")
        geno = read_genotypes(out / "qc" / "genotypes.qc.tsv")
        stage_of = geno.stage_of()
        subjects = sorted({r.subject_id for r in read_records(out / "dataset" / "test.jsonl")})
        preds = []
        for seed in (11, 12):
            enc = []
            for sid in subjects:
                g = permute_gene_blocks(geno.genome(sid), seed)
                r = build_prompt(serialize_genome(g), True, None, sid)
                enc.append(encode_record(r.text, None, vocab, len(table), table.ids, sid, stage_of[sid],
                                         f"dataset/patches/{sid}.rpat"))
            preds.append(predict(params, mcfg, vocab, enc, pipeline._store(out)))
        agree = np.mean([a == b for a, b in zip(*preds)])
        print(f"label agreement across two gene-block orders: {agree:.3f} over {len(subjects)} held-out subjects")
        assert agree >= 0.95
