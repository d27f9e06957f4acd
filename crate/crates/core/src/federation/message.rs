use crate::tensor::Tensor;

/// Client index. The target client is `0`; source clients are `1..=N`. The
/// same number is the client's label for the discriminator.
pub type ClientId = usize;

pub const TARGET_ID: ClientId = 0;

/// Every payload exchanged between clients and the server.
#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    /// Representative's initialised parameters, one tensor per weight or bias
    /// in layer order.
    ParamBroadcast {
        extractor: Vec<Tensor>,
        classifier: Vec<Tensor>,
    },
    FeatureUpload {
        client: ClientId,
        features: Tensor,
        indices: Vec<usize>,
    },
    TargetFeatureBroadcast {
        features: Tensor,
    },
    PredictionUpload {
        client: ClientId,
        probabilities: Tensor,
    },
    /// `∂L_d/∂features` for the client's last upload, before any reversal.
    DiscFeedback {
        client: ClientId,
        feature_grads: Tensor,
        loss: f64,
    },
    /// `∂L_p/∂probabilities` for the client's last prediction upload.
    ConsistencyFeedback {
        client: ClientId,
        probability_grads: Tensor,
        loss: f64,
    },
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::ParamBroadcast { .. } => 0,
            Message::FeatureUpload { .. } => 1,
            Message::TargetFeatureBroadcast { .. } => 2,
            Message::PredictionUpload { .. } => 3,
            Message::DiscFeedback { .. } => 4,
            Message::ConsistencyFeedback { .. } => 5,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Message::ParamBroadcast { .. } => "ParamBroadcast",
            Message::FeatureUpload { .. } => "FeatureUpload",
            Message::TargetFeatureBroadcast { .. } => "TargetFeatureBroadcast",
            Message::PredictionUpload { .. } => "PredictionUpload",
            Message::DiscFeedback { .. } => "DiscFeedback",
            Message::ConsistencyFeedback { .. } => "ConsistencyFeedback",
        }
    }

    pub fn client(&self) -> Option<ClientId> {
        match self {
            Message::FeatureUpload { client, .. }
            | Message::PredictionUpload { client, .. }
            | Message::DiscFeedback { client, .. }
            | Message::ConsistencyFeedback { client, .. } => Some(*client),
            _ => None,
        }
    }
}
