use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};
use sportprov::game::GameError;
use sportprov::graph::GraphError;
use sportprov::privacy::PrivacyError;
use sportprov::query::QueryError;
use sportprov::sprov::SprovError;
use sportprov::workflow::WorkflowError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Game(#[from] GameError),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Sprov(#[from] SprovError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("unknown game `{0}`")]
    UnknownGame(String),
    #[error("event `{0}` was already ingested with different content")]
    ConflictingEvent(String),
    #[error("game `{0}` already exists with a different roster")]
    ConflictingGame(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("storage: {0}")]
    Storage(String),
}

/// Coarse error classes; HTTP statuses and exit codes follow them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Invalid,
    NotFound,
    Conflict,
    Internal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    pub detail: Json,
}

impl ServiceError {
    pub fn code(&self) -> &'static str {
        use ServiceError as S;
        match self {
            S::Game(e) => match e {
                GameError::OutOfOrderEvent { .. } => "out_of_order_event",
                GameError::UnknownPlayer(_) => "unknown_player",
                GameError::NoOpenChain => "no_open_chain",
                GameError::InvalidEvent { .. } => "invalid_event",
                GameError::InvalidInterval { .. } => "invalid_interval",
                GameError::Parse { .. } => "parse_error",
                GameError::Graph(_) => "graph_error",
            },
            S::Workflow(e) => match e {
                WorkflowError::UnknownWorkflow(_) => "unknown_workflow",
                WorkflowError::DuplicateWorkflow(_) => "duplicate_workflow",
                WorkflowError::CyclicWorkflow(_) => "cyclic_workflow",
                WorkflowError::PortTypeMismatch { .. } => "port_type_mismatch",
                WorkflowError::UnknownBuiltin(_) => "unknown_builtin",
                WorkflowError::InvalidDefinition(_) => "invalid_definition",
                WorkflowError::MissingInput(_) => "missing_input",
                WorkflowError::UnknownInput(_) => "unknown_input",
                WorkflowError::UnknownRun(_) => "unknown_run",
                WorkflowError::UnknownStep(_) => "unknown_step",
                WorkflowError::NotAwaiting { .. } => "not_awaiting",
                WorkflowError::SchemaMismatch { .. } => "schema_mismatch",
                WorkflowError::UnknownEntity(_) => "unknown_entity",
                WorkflowError::UnknownVersion(_) => "unknown_version",
                WorkflowError::StepFailed { .. } => "step_failed",
                WorkflowError::Graph(_) => "graph_error",
            },
            S::Query(e) => match e {
                QueryError::UnknownNode(_) => "unknown_node",
                QueryError::NotAGoal(_) => "not_a_goal",
                QueryError::NotAMetric(_) => "not_a_metric",
            },
            S::Sprov(_) => "sprov_error",
            S::Privacy(e) => match e {
                PrivacyError::UnknownNode(_) => "unknown_node",
                PrivacyError::InvalidBoundary(_) => "invalid_boundary",
                PrivacyError::FrontierMismatch(_) => "frontier_mismatch",
                PrivacyError::ConflictingNode(_) => "conflicting_node",
                PrivacyError::ParseError(_) => "sprov_error",
                _ => "privacy_error",
            },
            S::Graph(_) => "graph_error",
            S::UnknownGame(_) => "unknown_game",
            S::ConflictingEvent(_) => "conflicting_event",
            S::ConflictingGame(_) => "conflicting_game",
            S::BadRequest(_) => "bad_request",
            S::Storage(_) => "storage_error",
        }
    }

    pub fn class(&self) -> ErrorClass {
        use ServiceError as S;
        match self {
            S::Game(GameError::OutOfOrderEvent { .. }) | S::ConflictingEvent(_) | S::ConflictingGame(_) => ErrorClass::Conflict,
            S::Workflow(WorkflowError::DuplicateWorkflow(_) | WorkflowError::NotAwaiting { .. }) => ErrorClass::Conflict,
            S::Privacy(PrivacyError::ConflictingNode(_)) => ErrorClass::Conflict,
            S::Workflow(
                WorkflowError::UnknownWorkflow(_)
                | WorkflowError::UnknownRun(_)
                | WorkflowError::UnknownStep(_)
                | WorkflowError::UnknownEntity(_)
                | WorkflowError::UnknownVersion(_),
            )
            | S::Query(QueryError::UnknownNode(_))
            | S::Privacy(PrivacyError::UnknownNode(_))
            | S::UnknownGame(_) => ErrorClass::NotFound,
            S::Storage(_) => ErrorClass::Internal,
            _ => ErrorClass::Invalid,
        }
    }

    pub fn detail(&self) -> Json {
        use ServiceError as S;
        match self {
            S::Game(GameError::OutOfOrderEvent { event_id, ts_ms, last_event_id, last_ts_ms }) => {
                json!({ "event_id": event_id, "ts_ms": ts_ms, "last_event_id": last_event_id, "last_ts_ms": last_ts_ms })
            }
            S::Game(GameError::Parse { line, .. }) => json!({ "line": line }),
            S::Workflow(WorkflowError::StepFailed { step, cause }) => json!({ "step": step, "cause": cause }),
            S::Workflow(WorkflowError::SchemaMismatch { step, reason }) => json!({ "step": step, "reason": reason }),
            S::Workflow(WorkflowError::NotAwaiting { run, step }) => json!({ "run": run, "step": step }),
            S::Sprov(SprovError::Syntax { line, col, .. } | SprovError::UnknownRelation { line, col, .. }) => {
                json!({ "line": line, "col": col })
            }
            _ => Json::Null,
        }
    }

    pub fn body(&self) -> ErrorBody {
        ErrorBody { code: self.code().to_string(), message: self.to_string(), detail: self.detail() }
    }
}

impl From<std::io::Error> for ServiceError {
    fn from(e: std::io::Error) -> Self {
        ServiceError::Storage(e.to_string())
    }
}
