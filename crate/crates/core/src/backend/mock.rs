use std::collections::HashMap;
use std::sync::Mutex;

use super::{Backend, BackendDescriptor, BackendError, BackendKind, Capability, GenerationRequest};

type Responder = dyn Fn(&GenerationRequest) -> Result<Vec<String>, BackendError> + Send + Sync;

/// Replays canned candidate texts keyed by image reference and records every
/// request it receives. A script shorter than the requested candidate count
/// is cycled.
pub struct ScriptedBackend {
    scripts: HashMap<String, Vec<String>>,
    responder: Option<Box<Responder>>,
    requests: Mutex<Vec<GenerationRequest>>,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self {
            scripts: HashMap::new(),
            responder: None,
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn with_script<I, S>(mut self, image_ref: impl Into<String>, candidates: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.scripts.insert(
            image_ref.into(),
            candidates.into_iter().map(Into::into).collect(),
        );
        self
    }

    /// Fallback for image references without a script.
    pub fn with_responder<F>(mut self, f: F) -> Self
    where
        F: Fn(&GenerationRequest) -> Result<Vec<String>, BackendError> + Send + Sync + 'static,
    {
        self.responder = Some(Box::new(f));
        self
    }

    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.requests.lock().expect("request log lock").clone()
    }
}

impl Default for ScriptedBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl std::fmt::Debug for ScriptedBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScriptedBackend")
            .field("scripts", &self.scripts.len())
            .field("responder", &self.responder.is_some())
            .finish()
    }
}

impl Backend for ScriptedBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            kind: BackendKind::Mock,
            endpoint: None,
            model_name: "scripted".into(),
            capabilities: [Capability::Generate].into_iter().collect(),
        }
    }

    fn generate(&self, request: &GenerationRequest) -> Result<Vec<String>, BackendError> {
        self.requests
            .lock()
            .expect("request log lock")
            .push(request.clone());
        match self.scripts.get(&request.image_ref) {
            Some(script) if !script.is_empty() => Ok(script
                .iter()
                .cycle()
                .take(request.num_candidates)
                .cloned()
                .collect()),
            _ => match &self.responder {
                Some(f) => f(request),
                None => Err(BackendError::Unscripted(request.image_ref.clone())),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{generate, score_sequence};

    fn req(image: &str, n: usize) -> GenerationRequest {
        GenerationRequest {
            image_ref: image.into(),
            prompt: "p".into(),
            num_candidates: n,
            temperature: 0.7,
            max_tokens: 10,
            seed: 1,
        }
    }

    #[test]
    fn replays_and_records() {
        let b = ScriptedBackend::new().with_script("a", ["x", "y"]);
        assert_eq!(generate(&b, &req("a", 3)).unwrap(), ["x", "y", "x"]);
        assert!(matches!(
            generate(&b, &req("b", 1)),
            Err(BackendError::Unscripted(_))
        ));
        assert_eq!(b.requests().len(), 2);
    }

    #[test]
    fn lacks_score_capability() {
        let b = ScriptedBackend::new();
        assert!(matches!(
            score_sequence(&b, "a", "p", &["t".into()]),
            Err(BackendError::CapabilityMissing(Capability::Score))
        ));
    }

    #[test]
    fn short_responder_is_caught() {
        let b = ScriptedBackend::new().with_responder(|_| Ok(vec!["one".into()]));
        assert!(matches!(
            generate(&b, &req("z", 2)),
            Err(BackendError::CandidateCount {
                expected: 2,
                got: 1
            })
        ));
    }
}
