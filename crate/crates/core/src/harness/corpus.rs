use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use serde::{Deserialize, Serialize};

use crate::agent::{DataSource, SyntheticDialogSource, SyntheticProseSource};
use crate::base_lm::{pretrain, BaseConfig, BaseModel, PretrainConfig, PretrainReport, Tokenizer};
use crate::error::Result;

/// Dialog fact table reserved for pretraining; experiment tasks use others.
pub const PRETRAIN_DIALOG_VARIANT: u64 = 99;

/// Shuffled general-domain pretraining windows: prose plus question/answer
/// lines drawn from a fact table no experiment task uses.
pub fn general_corpus(tokenizer: &Tokenizer, prose_records: usize, qa_records: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    let mut sources: [Box<dyn DataSource>; 2] = [
        Box::new(SyntheticProseSource::new("prose", seed, prose_records)),
        Box::new(SyntheticDialogSource::with_variant(
            "qa",
            seed ^ 0x9a,
            qa_records,
            PRETRAIN_DIALOG_VARIANT,
        )),
    ];
    let mut corpus = Vec::new();
    for s in sources.iter_mut() {
        while let Some(doc) = s.fetch_next()? {
            corpus.extend(tokenizer.chunk(&doc.text));
        }
    }
    corpus.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(corpus)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneralBaseConfig {
    pub model: BaseConfig,
    pub pretrain: PretrainConfig,
    pub prose_records: usize,
    pub qa_records: usize,
    pub corpus_seed: u64,
}

impl Default for GeneralBaseConfig {
    fn default() -> Self {
        Self {
            model: BaseConfig::default(),
            pretrain: PretrainConfig::default(),
            prose_records: 2000,
            qa_records: 2000,
            corpus_seed: 7,
        }
    }
}

/// Builds a base model and pretrains it on [`general_corpus`]. The model is
/// returned unfrozen.
pub fn pretrain_general_base(config: &GeneralBaseConfig) -> Result<(BaseModel, PretrainReport)> {
    config.model.validate()?;
    let mut model = BaseModel::new(config.model.clone())?;
    let corpus = general_corpus(
        &model.tokenizer(),
        config.prose_records,
        config.qa_records,
        config.corpus_seed,
    )?;
    let report = pretrain(&mut model, &corpus, &config.pretrain)?;
    Ok((model, report))
}
