use std::fmt;
use std::sync::Arc;

use super::{JointPolicy, TabularGame};
use crate::error::{Error, Result};

/// How an environment reshapes its base game in response to a deployed joint policy.
///
/// Implementations must be deterministic: the same policy yields a bit-identical game.
pub trait Response: Send + Sync + fmt::Debug {
    fn respond(&self, base: &TabularGame, policy: &JointPolicy) -> Result<TabularGame>;
}

/// A response that ignores the deployed policy.
#[derive(Debug, Clone, Copy, Default)]
pub struct ConstantResponse;

impl Response for ConstantResponse {
    fn respond(&self, base: &TabularGame, _policy: &JointPolicy) -> Result<TabularGame> {
        Ok(base.clone())
    }
}

/// The performative environment: a base game plus the map `pi -> G(pi)`.
#[derive(Clone)]
pub struct ResponseMap {
    base: Arc<TabularGame>,
    response: Arc<dyn Response>,
    label: String,
    params: serde_json::Value,
}

impl fmt::Debug for ResponseMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ResponseMap")
            .field("label", &self.label)
            .field("params", &self.params)
            .field("response", &self.response)
            .finish_non_exhaustive()
    }
}

impl ResponseMap {
    pub fn new(
        base: TabularGame,
        response: Arc<dyn Response>,
        label: impl Into<String>,
        params: serde_json::Value,
    ) -> Self {
        Self {
            base: Arc::new(base),
            response,
            label: label.into(),
            params,
        }
    }

    /// Environment whose deployed game never changes.
    pub fn constant(base: TabularGame, label: impl Into<String>) -> Self {
        Self::new(base, Arc::new(ConstantResponse), label, serde_json::Value::Null)
    }

    pub fn base(&self) -> &TabularGame {
        &self.base
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn params(&self) -> &serde_json::Value {
        &self.params
    }

    /// The game induced by deploying `policy`.
    pub fn deploy(&self, policy: &JointPolicy) -> Result<TabularGame> {
        policy.check_shape(&self.base)?;
        let game = self.response.respond(&self.base, policy)?;
        if !game.same_shape(&self.base) {
            return Err(Error::InvalidResponse(format!(
                "environment '{}' changed the game's shape",
                self.label
            )));
        }
        game.validate()
            .map_err(|e| Error::InvalidResponse(format!("environment '{}': {e}", self.label)))?;
        Ok(game)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug)]
    struct Shrinks;

    impl Response for Shrinks {
        fn respond(&self, base: &TabularGame, _policy: &JointPolicy) -> Result<TabularGame> {
            TabularGame::new(&[1], 1, base.gamma(), vec![1.0], vec![vec![0.0]], vec![1.0])
        }
    }

    fn base() -> TabularGame {
        TabularGame::new(&[2], 1, 0.5, vec![1.0], vec![vec![1.0, 0.0]], vec![1.0, 1.0]).unwrap()
    }

    #[test]
    fn constant_map_returns_base() {
        let map = ResponseMap::constant(base(), "bandit");
        let g = map.deploy(&JointPolicy::uniform(1, &[2])).unwrap();
        assert_eq!(&g, map.base());
    }

    #[test]
    fn deploy_rejects_wrong_policy_shape() {
        let map = ResponseMap::constant(base(), "bandit");
        let err = map.deploy(&JointPolicy::uniform(1, &[3]));
        assert!(matches!(err, Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn deploy_rejects_shape_changing_response() {
        let map = ResponseMap::new(base(), Arc::new(Shrinks), "broken", serde_json::Value::Null);
        let err = map.deploy(&JointPolicy::uniform(1, &[2]));
        assert!(matches!(err, Err(Error::InvalidResponse(_))));
    }
}
