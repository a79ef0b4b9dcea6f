use structkd_core::objective::{decode, sentence_lattice};
use structkd_core::{LabelSequence, Lattice, ModelParams, Tagset};

use crate::error::{Error, Result};
use crate::vocab::Vocab;

/// Parameters together with the vocabulary and tagset they were trained on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub vocab: Vocab,
    pub tagset: Tagset,
}

impl TrainedModel {
    pub fn new(params: ModelParams, vocab: Vocab, tagset: Tagset) -> Result<Self> {
        params.check_shapes()?;
        if params.dims.vocab != vocab.len() || params.dims.num_labels != tagset.len() {
            return Err(Error::Checkpoint(format!(
                "parameter dims {:?} disagree with vocab {} / tagset {}",
                params.dims,
                vocab.len(),
                tagset.len()
            )));
        }
        Ok(TrainedModel { params, vocab, tagset })
    }

    pub fn token_ids<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        self.vocab.ids(tokens)
    }

    pub fn lattice<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Lattice> {
        Ok(sentence_lattice(&self.params, &self.token_ids(tokens))?)
    }

    pub fn predict_ids<S: AsRef<str>>(&self, tokens: &[S]) -> Result<LabelSequence> {
        Ok(decode(&self.params, &self.token_ids(tokens))?)
    }

    pub fn predict<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<String>> {
        let ids = self.predict_ids(tokens)?;
        Ok(self.tagset.decode(&ids.0)?.into_iter().map(String::from).collect())
    }
}
