//! Read-only HTTP layer over a loaded pipeline set.
//!
//! Routes: `GET /health`, `GET /pipelines`, `POST /recommend`. Errors use the
//! envelope `{"error": kind, "message": text, "fields": [{"field", "message"}]}`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use glyco::cohort::{PatientVisit, BMI_RANGE, HBA1C_RANGE};
use glyco::evaluate::GtmSet;
use glyco::pipeline::{PipelineSet, Trace};
use glyco::regimen::{Group, Regimen};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::manifest::sha256_hex;

/// Immutable state shared by all handlers.
#[derive(Debug)]
pub struct Snapshot {
    pub pipelines: PipelineSet,
    pub gtms: Option<GtmSet>,
    pub digest: String,
}

impl Snapshot {
    pub fn new(pipelines: PipelineSet, gtms: Option<GtmSet>) -> Snapshot {
        let digest = sha256_hex(pipelines.export_json().as_bytes());
        Snapshot {
            pipelines,
            gtms,
            digest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendResponse {
    pub visit_id: String,
    pub group: Group,
    pub recommendation: Regimen,
    pub trace: Trace,
    /// GTM-predicted HbA1c reduction under the recommendation, when a model
    /// for that (group, regimen) pair is loaded.
    pub predicted_reduction: Option<f64>,
    pub pipeline_digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub pipeline_digest: String,
    pub pipelines: usize,
    pub gtms_loaded: bool,
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, error: &str, message: impl Into<String>) -> ApiError {
        ApiError {
            status,
            body: ErrorBody {
                error: error.into(),
                message: message.into(),
                fields: Vec::new(),
            },
        }
    }

    fn invalid(fields: Vec<FieldError>) -> ApiError {
        let names: Vec<&str> = fields.iter().map(|f| f.field.as_str()).collect();
        let message = format!("invalid fields: {}", names.join(", "));
        ApiError {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                error: "invalid_request".into(),
                message,
                fields,
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

pub fn router(snapshot: Arc<Snapshot>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/pipelines", get(pipelines))
        .route("/recommend", post(recommend))
        .with_state(snapshot)
}

async fn health(State(s): State<Arc<Snapshot>>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        pipeline_digest: s.digest.clone(),
        pipelines: s.pipelines.len(),
        gtms_loaded: s.gtms.is_some(),
    })
}

async fn pipelines(State(s): State<Arc<Snapshot>>) -> Json<Value> {
    let mut doc: Value = serde_json::from_str(&s.pipelines.export_json()).expect("export is JSON");
    doc["pipeline_digest"] = Value::String(s.digest.clone());
    Json(doc)
}

async fn recommend(
    State(s): State<Arc<Snapshot>>,
    body: Bytes,
) -> Result<Json<RecommendResponse>, ApiError> {
    let doc: Value = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_json", e.to_string()))?;
    let visit = parse_visit(&doc)?;
    let group = visit.group().ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "unknown_group",
            format!(
                "no pipeline group for current regimen {}",
                visit.current_regimen
            ),
        )
    })?;
    if s.pipelines.get(group).is_none() {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "unknown_group",
            format!("no pipeline loaded for group {group}"),
        ));
    }
    let rec = s
        .pipelines
        .recommend(&visit)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "pipeline", e.to_string()))?;
    let predicted_reduction = s
        .gtms
        .as_ref()
        .and_then(|g| g.get(group, rec.regimen))
        .map(|m| m.predict(&visit));
    Ok(Json(RecommendResponse {
        visit_id: visit.visit_id,
        group,
        recommendation: rec.regimen,
        trace: rec.trace,
        predicted_reduction,
        pipeline_digest: s.digest.clone(),
    }))
}

const HBA1C_FIELDS: [&str; 5] = [
    "hba1c_last",
    "hba1c_p25",
    "hba1c_median",
    "hba1c_mean",
    "hba1c_p75",
];
const BMI_FIELDS: [&str; 5] = ["bmi_last", "bmi_p25", "bmi_median", "bmi_mean", "bmi_p75"];

/// Builds a visit from a request document, collecting every field problem
/// before failing.
pub fn parse_visit(doc: &Value) -> Result<PatientVisit, ApiError> {
    let Some(obj) = doc.as_object() else {
        return Err(ApiError::invalid(vec![FieldError {
            field: "body".into(),
            message: "expected a JSON object".into(),
        }]));
    };
    let mut errors = Vec::new();
    let mut fail = |field: &str, message: String| {
        errors.push(FieldError {
            field: field.into(),
            message,
        })
    };

    let number = |field: &str, range: (f64, f64), fail: &mut dyn FnMut(&str, String)| -> f64 {
        match obj.get(field) {
            None | Some(Value::Null) => {
                fail(field, "missing".into());
                f64::NAN
            }
            Some(v) => match v.as_f64() {
                Some(x) if x > range.0 && x < range.1 => x,
                Some(x) => {
                    fail(field, format!("{x} outside ({}, {})", range.0, range.1));
                    f64::NAN
                }
                None => {
                    fail(field, "expected a number".into());
                    f64::NAN
                }
            },
        }
    };
    let age = number("age", (0.0, 130.0), &mut fail);
    let hba1c: Vec<f64> = HBA1C_FIELDS
        .iter()
        .map(|f| number(f, HBA1C_RANGE, &mut fail))
        .collect();
    let bmi: Vec<f64> = BMI_FIELDS
        .iter()
        .map(|f| number(f, BMI_RANGE, &mut fail))
        .collect();

    let kidney = match obj.get("kidney_contraindication") {
        None | Some(Value::Null) => {
            fail("kidney_contraindication", "missing".into());
            false
        }
        Some(Value::Bool(b)) => *b,
        Some(_) => {
            fail("kidney_contraindication", "expected true or false".into());
            false
        }
    };
    let current = match obj.get("current_regimen") {
        None | Some(Value::Null) => {
            fail("current_regimen", "missing".into());
            None
        }
        Some(Value::String(s)) => match s.parse::<Regimen>() {
            Ok(r) => Some(r),
            Err(e) => {
                fail("current_regimen", e.to_string());
                None
            }
        },
        Some(_) => {
            fail("current_regimen", "expected a regimen label".into());
            None
        }
    };
    let text = |field: &str, default: &str, fail: &mut dyn FnMut(&str, String)| match obj.get(field)
    {
        None | Some(Value::Null) => default.to_string(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => {
            fail(field, "expected a string".into());
            default.to_string()
        }
    };
    let visit_id = text("visit_id", "request", &mut fail);
    let sex = text("sex", "unknown", &mut fail);
    let race = text("race", "unknown", &mut fail);
    check_order("hba1c", &hba1c, &mut fail);
    check_order("bmi", &bmi, &mut fail);

    let Some(current) = current.filter(|_| errors.is_empty()) else {
        return Err(ApiError::invalid(errors));
    };
    Ok(PatientVisit {
        visit_id,
        age,
        sex,
        race,
        kidney_contraindication: kidney,
        hba1c_last: hba1c[0],
        hba1c_p25: hba1c[1],
        hba1c_median: hba1c[2],
        hba1c_mean: hba1c[3],
        hba1c_p75: hba1c[4],
        bmi_last: bmi[0],
        bmi_p25: bmi[1],
        bmi_median: bmi[2],
        bmi_mean: bmi[3],
        bmi_p75: bmi[4],
        current_regimen: current,
        prescribed_regimen: current,
        hba1c_after: hba1c[0],
    })
}

/// p25 <= median <= p75; skipped when any of them already failed.
fn check_order(prefix: &str, values: &[f64], fail: &mut dyn FnMut(&str, String)) {
    let (p25, median, p75) = (values[1], values[2], values[4]);
    if [p25, median, p75].iter().any(|v| v.is_nan()) {
        return;
    }
    if p25 > median {
        fail(
            &format!("{prefix}_p25"),
            format!("{p25} exceeds {prefix}_median {median}"),
        );
    }
    if median > p75 {
        fail(
            &format!("{prefix}_p75"),
            format!("{p75} is below {prefix}_median {median}"),
        );
    }
}

/// Runs the service until the process is stopped.
pub async fn serve(snapshot: Arc<Snapshot>, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(snapshot)).await?;
    Ok(())
}
