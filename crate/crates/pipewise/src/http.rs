//! Small blocking HTTP server shell over `tiny_http`, shared by the ingest
//! and API services.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use serde::Serialize;
use tiny_http::{Header, Response, Server};

pub struct Request {
    pub method: String,
    pub path: String,
    pub query: HashMap<String, String>,
    pub body: Vec<u8>,
}

impl Request {
    /// Non-empty path segments.
    pub fn segments(&self) -> Vec<&str> {
        self.path.split('/').filter(|s| !s.is_empty()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Reply {
    pub status: u16,
    pub content_type: &'static str,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
}

impl Reply {
    pub fn json<T: Serialize>(status: u16, body: &T) -> Self {
        Self {
            status,
            content_type: "application/json",
            headers: Vec::new(),
            body: serde_json::to_vec(body).expect("reply serializes"),
        }
    }

    pub fn error(status: u16, message: &str) -> Self {
        Self::json(status, &ErrorBody { error: message })
    }

    pub fn not_found(what: &str) -> Self {
        Self::error(404, &format!("{what} not found"))
    }

    pub fn bad_request(message: &str) -> Self {
        Self::error(400, message)
    }

    pub fn text(status: u16, content_type: &'static str, body: Vec<u8>) -> Self {
        Self { status, content_type, headers: Vec::new(), body }
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }
}

pub struct HttpService {
    server: Arc<Server>,
    addr: SocketAddr,
    threads: Vec<JoinHandle<()>>,
}

impl HttpService {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for _ in &self.threads {
            self.server.unblock();
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for HttpService {
    fn drop(&mut self) {
        self.stop();
    }
}

pub fn serve_http<F>(addr: &str, threads: usize, handler: F) -> std::io::Result<HttpService>
where
    F: Fn(&Request) -> Reply + Send + Sync + 'static,
{
    let server = Arc::new(Server::http(addr).map_err(|e| std::io::Error::other(e.to_string()))?);
    let addr = server.server_addr().to_ip().ok_or_else(|| std::io::Error::other("not an IP listener"))?;
    let handler = Arc::new(handler);
    let threads = (0..threads.max(1))
        .map(|i| {
            let (server, handler) = (server.clone(), handler.clone());
            thread::Builder::new()
                .name(format!("http-{i}"))
                .spawn(move || {
                    while let Ok(mut req) = server.recv() {
                        let reply = handle(&mut req, &*handler);
                        let mut resp = Response::from_data(reply.body)
                            .with_status_code(reply.status)
                            .with_header(Header::from_bytes("Content-Type", reply.content_type).expect("static header"));
                        for (k, v) in &reply.headers {
                            if let Ok(h) = Header::from_bytes(k.as_bytes(), v.as_bytes()) {
                                resp = resp.with_header(h);
                            }
                        }
                        let _ = req.respond(resp);
                    }
                })
                .expect("spawn http thread")
        })
        .collect();
    Ok(HttpService { server, addr, threads })
}

fn handle(req: &mut tiny_http::Request, handler: &dyn Fn(&Request) -> Reply) -> Reply {
    let url = req.url().to_string();
    let (path, query) = url.split_once('?').unwrap_or((&url, ""));
    let query: HashMap<String, String> = form_urlencoded::parse(query.as_bytes()).into_owned().collect();
    let mut body = Vec::new();
    if let Err(e) = req.as_reader().read_to_end(&mut body) {
        return Reply::bad_request(&format!("unreadable body: {e}"));
    }
    let r = Request { method: req.method().as_str().to_uppercase(), path: path.to_string(), query, body };
    handler(&r)
}

/// Parses a required integer query parameter.
pub fn query_i64(req: &Request, name: &str) -> Result<i64, Reply> {
    let v = req.query.get(name).ok_or_else(|| Reply::bad_request(&format!("missing `{name}`")))?;
    v.parse().map_err(|_| Reply::bad_request(&format!("`{name}` must be an integer")))
}
