//! Generation strategies, selectable by name.

use super::{
    generate_batch, generate_one_to_one, CompletionProvider, GenerateError, GenerationBatch, GenerationRequest,
};
use crate::kb::QAPair;
use crate::prompt::Mode;
use crate::registry::Registry;

pub trait GenerationStrategy: Send + Sync {
    fn name(&self) -> &'static str;
    fn mode(&self) -> Mode;
    fn generate(
        &self,
        provider: &dyn CompletionProvider,
        pair: &QAPair,
        request: &GenerationRequest,
    ) -> Result<GenerationBatch, GenerateError>;
}

/// One question per call, repeated `n` times.
#[derive(Debug, Default, Clone, Copy)]
pub struct OneToOneStrategy;

/// `K` questions per call from the source question alone.
#[derive(Debug, Default, Clone, Copy)]
pub struct ContextAwareStrategy;

/// `K` questions per call from the source question and its answer.
#[derive(Debug, Default, Clone, Copy)]
pub struct IntentionEnhancedStrategy;

impl GenerationStrategy for OneToOneStrategy {
    fn name(&self) -> &'static str {
        Mode::OneToOne.as_str()
    }
    fn mode(&self) -> Mode {
        Mode::OneToOne
    }
    fn generate(
        &self,
        provider: &dyn CompletionProvider,
        pair: &QAPair,
        request: &GenerationRequest,
    ) -> Result<GenerationBatch, GenerateError> {
        generate_one_to_one(provider, pair, request)
    }
}

impl GenerationStrategy for ContextAwareStrategy {
    fn name(&self) -> &'static str {
        Mode::ContextAware.as_str()
    }
    fn mode(&self) -> Mode {
        Mode::ContextAware
    }
    fn generate(
        &self,
        provider: &dyn CompletionProvider,
        pair: &QAPair,
        request: &GenerationRequest,
    ) -> Result<GenerationBatch, GenerateError> {
        generate_batch(provider, pair, Mode::ContextAware, request)
    }
}

impl GenerationStrategy for IntentionEnhancedStrategy {
    fn name(&self) -> &'static str {
        Mode::IntentionEnhanced.as_str()
    }
    fn mode(&self) -> Mode {
        Mode::IntentionEnhanced
    }
    fn generate(
        &self,
        provider: &dyn CompletionProvider,
        pair: &QAPair,
        request: &GenerationRequest,
    ) -> Result<GenerationBatch, GenerateError> {
        generate_batch(provider, pair, Mode::IntentionEnhanced, request)
    }
}

/// Registry of the three built-in strategies plus short aliases
/// (`one`, `context`, `intention`).
pub fn strategy_registry() -> Registry<dyn GenerationStrategy, ()> {
    let mut reg: Registry<dyn GenerationStrategy, ()> = Registry::new("strategy");
    reg.register(Mode::OneToOne.as_str(), |_| Ok(Box::new(OneToOneStrategy)))
        .register(Mode::ContextAware.as_str(), |_| Ok(Box::new(ContextAwareStrategy)))
        .register(Mode::IntentionEnhanced.as_str(), |_| {
            Ok(Box::new(IntentionEnhancedStrategy))
        })
        .alias("one", "one_to_one")
        .alias("one-to-one", "one_to_one")
        .alias("context", "context_aware")
        .alias("context-aware", "context_aware")
        .alias("intention", "intention_enhanced")
        .alias("intention-enhanced", "intention_enhanced");
    reg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_mode_is_registered() {
        let reg = strategy_registry();
        for mode in Mode::ALL {
            let s = reg.create(mode.as_str(), &()).unwrap();
            assert_eq!(s.mode(), mode);
            assert_eq!(s.name(), mode.as_str());
        }
        assert_eq!(reg.create("intention", &()).unwrap().mode(), Mode::IntentionEnhanced);
    }
}
