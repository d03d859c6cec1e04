//! A minimal HTTP/1.1 server standing in for the detector endpoint.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use patchfold::compositor::{Annotation, Image};

pub struct MockRequest {
    pub path: String,
    pub headers: HashMap<String, String>,
    pub body: Vec<u8>,
}

type Handler = dyn Fn(&MockRequest) -> (u16, String) + Send + Sync;

pub struct MockServer {
    pub url: String,
    requests: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

fn serve(mut stream: TcpStream, handler: &Handler) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
    let mut headers = HashMap::new();
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h).unwrap_or(0) == 0 || h == "\r\n" {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            headers.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        }
    }
    let len: usize = headers.get("content-length").and_then(|v| v.parse().ok()).unwrap_or(0);
    let mut body = vec![0; len];
    if reader.read_exact(&mut body).is_err() {
        return;
    }
    let (status, text) = handler(&MockRequest { path, headers, body });
    let resp = format!(
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
        text.len()
    );
    let _ = stream.write_all(resp.as_bytes());
    let _ = stream.flush();
}

impl MockServer {
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(&MockRequest) -> (u16, String) + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let handler: Arc<Handler> = Arc::new(handler);
        let (r, s) = (requests.clone(), stop.clone());
        let thread = std::thread::spawn(move || {
            for conn in listener.incoming() {
                if s.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                r.fetch_add(1, Ordering::SeqCst);
                let h = handler.clone();
                std::thread::spawn(move || serve(stream, h.as_ref()));
            }
        });
        Self {
            url,
            requests,
            stop,
            thread: Some(thread),
        }
    }

    pub fn requests(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.url.trim_start_matches("http://"));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

pub fn detections_json(boxes: &[[f64; 4]], scores: &[f64], classes: &[&str]) -> String {
    serde_json::json!({ "boxes": boxes, "scores": scores, "classes": classes }).to_string()
}

/// A detector whose answers depend on the pixels: each ground-truth box is
/// found, shifted right in proportion to the mean intensity of its centre,
/// with a score that falls as the centre brightens. One low-score false
/// positive sits in the top-left corner of every image.
pub fn pixel_detector(annotations: Vec<Annotation>) -> impl Fn(&MockRequest) -> (u16, String) + Send + Sync {
    let by_id: HashMap<String, Annotation> = annotations.into_iter().map(|a| (a.image.clone(), a)).collect();
    move |req| {
        if req.path != "/detect" {
            return (404, "{}".into());
        }
        let Some(id) = req.headers.get("x-image-id") else {
            return (400, r#"{"error": "missing X-Image-Id"}"#.into());
        };
        let Some(a) = by_id.get(id) else {
            return (400, r#"{"error": "unknown image"}"#.into());
        };
        let img = Image::from_rgb8(&image::load_from_memory(&req.body).unwrap().to_rgb8());
        let mut boxes = vec![[0.0, 0.0, 20.0, 20.0]];
        let mut scores = vec![0.5];
        let mut classes = vec!["person"];
        for b in &a.boxes {
            let [x1, y1, x2, y2] = b.bbox.to_pixels(a.width, a.height);
            let (cx1, cx2) = ((x1 + (x2 - x1) / 4.0) as usize, (x2 - (x2 - x1) / 4.0) as usize);
            let (cy1, cy2) = ((y1 + (y2 - y1) / 4.0) as usize, (y2 - (y2 - y1) / 4.0) as usize);
            let mut sum = 0.0;
            let mut n = 0.0;
            for c in 0..3 {
                for y in cy1..cy2 {
                    for x in cx1..cx2 {
                        sum += f64::from(img.get(c, y, x));
                        n += 1.0;
                    }
                }
            }
            let m = sum / n;
            let shift = 0.6 * m * (x2 - x1);
            boxes.push([x1 + shift, y1, (x2 + shift).min(a.width as f64), y2]);
            scores.push(0.95 - 0.5 * m);
            classes.push("person");
        }
        (200, detections_json(&boxes, &scores, &classes))
    }
}
