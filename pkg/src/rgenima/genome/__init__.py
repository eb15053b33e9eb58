from .dataset import (
    Dataset,
    DatasetConfig,
    DatasetRecord,
    InsufficientSubjects,
    MissingPatchSet,
    build_dataset,
    read_records,
    split_subjects,
    write_records,
)
from .prompt import (
    IMG_TOKEN,
    PromptRecord,
    build_prompt,
    parse_genome,
    permute_gene_blocks,
    serialize_genome,
)
from .qc import (
    QcReport,
    QcThresholds,
    column_maf,
    column_missingness,
    hwe_exact_p,
    hwe_het_distribution,
    impute_column,
    run_qc,
)
from .types import (
    MISSING,
    STAGES,
    GeneBlock,
    GenePanel,
    GenotypeMatrix,
    SubjectGenome,
    read_genotypes,
    read_panel,
    write_genotypes,
    write_panel,
)
