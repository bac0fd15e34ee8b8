//! Learning the structure of XSS attack vectors with Bayesian-merged HMMs
//! and generating mutated attacks from the learned profile.
//!
//! Pipeline: [`locator`] finds the attack in a URL, [`codec`] decodes it,
//! [`tokenizer`] turns it into typed tokens, [`learner`] merges the token
//! chains into an [`hmm::Hmm`], [`profile`] stores the result, [`generator`]
//! samples new attacks and [`gauntlet`] scores them against sink templates.

pub mod cli;
pub mod codec;
pub mod gauntlet;
pub mod generator;
pub mod hmm;
pub mod learner;
pub mod locator;
pub mod profile;
pub mod tokenizer;

pub use codec::{decode_fixpoint, encode, DecodeTrace, EncodeMode};
pub use gauntlet::{evaluate, EvaluationReport, SanitizerRule, SinkTemplate};
pub use generator::{generate, GenerationMode, GenerationRequest, MutatedAttack, Obfuscation};
pub use hmm::{Hmm, StateId};
pub use learner::{learn, LearnerConfig, LikelihoodMode};
pub use locator::{locate_attack, LocatedAttack};
pub use profile::AttackVectorProfile;
pub use tokenizer::{tokenize, RawCorpus, TokenKind, TokenSequence, TokenSymbol};
