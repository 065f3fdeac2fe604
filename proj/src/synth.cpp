#include <algorithm>
#include <array>
#include <cctype>
#include <random>

#include "reqsentry/evalkit.hpp"

namespace reqsentry {
namespace {

const std::array<const char*, 12> kPaths = {
    "/home",        "/profile",     "/search",     "/posts",  "/friends",  "/messages",
    "/settings",    "/static/app.js", "/static/site.css", "/login", "/logout", "/index.php"};

const std::array<const char*, 10> kWords = {"alice", "bob",   "nectar", "garden", "music",
                                            "photos", "events", "boston", "coffee", "hiking"};

const std::array<const char*, 6> kAgents = {
    "Mozilla/5.0 (Macintosh; Intel Mac OS X 10_15_7) AppleWebKit/605.1.15 (KHTML, like Gecko) "
    "Version/14.0 Safari/605.1.15",
    "Mozilla/5.0 (Windows NT 10.0; Win64; x64) AppleWebKit/537.36 (KHTML, like Gecko) "
    "Chrome/96.0.4664.110 Safari/537.36",
    "Mozilla/5.0 (X11; Linux x86_64; rv:95.0) Gecko/20100101 Firefox/95.0",
    "Mozilla/5.0 (iPhone; CPU iPhone OS 15_2 like Mac OS X) AppleWebKit/605.1.15 (KHTML, like "
    "Gecko) Version/15.2 Mobile/15E148 Safari/604.1",
    "Mozilla/5.0 (Windows NT 10.0; Win64; x64; rv:94.0) Gecko/20100101 Firefox/94.0",
    "Mozilla/5.0 (Linux; Android 12; Pixel 6) AppleWebKit/537.36 (KHTML, like Gecko) "
    "Chrome/96.0.4664.104 Mobile Safari/537.36"};

const std::array<const char*, 4> kAccept = {
    "text/html,application/xhtml+xml,application/xml;q=0.9,*/*;q=0.8", "*/*",
    "application/json", "image/avif,image/webp,*/*"};

const std::vector<std::string>& fragments() {
  static const std::vector<std::string> f = {
      // SQL injection: tautologies, comments, stacked and UNION queries.
      "' OR '1'='1",
      "' OR 1=1--",
      "admin'--",
      "1 UNION SELECT username, password FROM users--",
      "-1 UNION ALL SELECT NULL, table_name FROM information_schema.tables#",
      "1; DROP TABLE users--",
      "' AND SLEEP(5)--",
      // Reflected script injection.
      "<script>alert(1)</script>",
      "<img src=x onerror=alert(document.cookie)>",
      "\"><svg onload=alert(1)>",
      "javascript:alert(document.domain)",
      // %-escaped and double-escaped variants.
      "%27%20OR%20%271%27%3D%271",
      "%3Cscript%3Ealert(1)%3C%2Fscript%3E",
      "%2527%2520UNION%2520SELECT%2520password",
      "1%20UNION%20SELECT%20NULL--",
      "..%2F..%2F..%2Fetc%2Fpasswd",
  };
  return f;
}

template <typename C>
const auto& pick(const C& c, std::mt19937_64& rng) {
  return c[rng() % c.size()];
}

std::string hex_id(std::mt19937_64& rng) {
  static constexpr char kHex[] = "0123456789ABCDEF";
  std::string s(32, '0');
  for (auto& c : s) c = kHex[rng() % 16];
  return s;
}

std::string ip(std::mt19937_64& rng) {
  return std::to_string(1 + rng() % 223) + "." + std::to_string(rng() % 256) + "." +
         std::to_string(rng() % 256) + "." + std::to_string(1 + rng() % 254);
}

std::string benign_query(const std::string& path, std::mt19937_64& rng) {
  if (path == "/search") return "q=" + std::string(pick(kWords, rng));
  if (path == "/profile" || path == "/posts") return "id=" + std::to_string(rng() % 5000);
  if (path == "/messages") return "page=" + std::to_string(1 + rng() % 9);
  return "";
}

RequestRecord make_record(std::mt19937_64& rng, bool attack) {
  const std::string host = "nectarnetwork.org";
  std::string path = pick(kPaths, rng);
  std::string query = benign_query(path, rng);
  std::string agent = pick(kAgents, rng);
  std::string cookie = hex_id(rng);
  std::string referer = rng() % 2 ? "http://" + host + pick(kPaths, rng) : "";
  std::string method = (path == "/login" && rng() % 2) ? "POST" : "GET";

  if (attack) {
    const std::string& payload = pick(fragments(), rng);
    switch (rng() % 5) {
      case 0:
      case 1: {
        const std::array<const char*, 4> params = {"id", "q", "user", "page"};
        query = std::string(pick(params, rng)) + "=" + payload;
        if (path == "/static/app.js" || path == "/static/site.css") path = "/search";
        break;
      }
      case 2: agent = payload; break;
      case 3: cookie = payload; break;
      default: referer = "http://" + host + "/search?q=" + payload; break;
    }
  }

  const std::string url = "http://" + host + path + (query.empty() ? "" : "?" + query);
  RequestRecord r;
  r.fields = {
      {"getAuthType", std::nullopt},
      {"getPathInfo", std::nullopt},
      {"cookie: JSESSIONID", cookie},
      {"getRemoteAddr", ip(rng)},
      {"getServletPath", path},
      {"getMethod", method},
      {"getContextPath", std::string()},
      {"getServerName", host},
      {"getPathTranslated", std::nullopt},
      {"getRequestId", hex_id(rng)},
      {"header: user-agent", agent},
      {"getRequestURL", url},
      {"getRequestURI", path},
      {"getQueryString", query.empty() ? FieldValue{} : FieldValue{query}},
      {"header: accept", std::string(pick(kAccept, rng))},
      {"header: host", host},
  };
  if (!referer.empty()) r.fields.emplace_back("header: referer", referer);
  r.truth_label = attack ? 1 : 0;
  return r;
}

}  // namespace

std::span<const std::string> attack_fragments() { return fragments(); }

std::vector<RequestRecord> synth_corpus(std::size_t n_benign, std::size_t n_attack,
                                        std::uint64_t seed) {
  if (n_benign == 0 || n_attack == 0) throw InvalidInput("both class counts must be at least 1");
  std::mt19937_64 rng(seed);
  std::vector<bool> kinds(n_benign, false);
  kinds.insert(kinds.end(), n_attack, true);
  std::shuffle(kinds.begin(), kinds.end(), rng);

  // 2021-06-01T00:00:00Z, then irregular gaps of up to ten minutes.
  std::int64_t ts = 1622505600LL * 1000000;
  std::vector<RequestRecord> out;
  out.reserve(kinds.size());
  for (const bool attack : kinds) {
    auto r = make_record(rng, attack);
    ts += 1 + static_cast<std::int64_t>(rng() % 600'000'000);
    r.timestamp_us = ts;
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<RequestRecord> parse_raw_http_requests(std::string_view text, int label) {
  std::vector<RequestRecord> out;
  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    auto line = text.substr(pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    pos = nl + 1;
  }

  auto is_request_line = [](std::string_view l) {
    for (std::string_view m : {"GET ", "POST ", "PUT ", "DELETE ", "HEAD ", "OPTIONS "}) {
      if (l.starts_with(m) && l.ends_with(" HTTP/1.1")) return true;
      if (l.starts_with(m) && l.ends_with(" HTTP/1.0")) return true;
    }
    return false;
  };

  std::size_t i = 0;
  while (i < lines.size()) {
    if (!is_request_line(lines[i])) {
      ++i;
      continue;
    }
    RequestRecord r;
    const auto l = lines[i];
    const auto sp1 = l.find(' ');
    const auto sp2 = l.rfind(' ');
    r.fields.emplace_back("getMethod", std::string(l.substr(0, sp1)));
    r.fields.emplace_back("getRequestURL", std::string(l.substr(sp1 + 1, sp2 - sp1 - 1)));
    r.fields.emplace_back("getProtocol", std::string(l.substr(sp2 + 1)));
    ++i;
    while (i < lines.size() && !lines[i].empty() && !is_request_line(lines[i])) {
      const auto colon = lines[i].find(':');
      if (colon != std::string_view::npos) {
        std::string name(lines[i].substr(0, colon));
        std::transform(name.begin(), name.end(), name.begin(),
                       [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
        auto value = lines[i].substr(colon + 1);
        while (!value.empty() && value.front() == ' ') value.remove_prefix(1);
        std::string key = "header: " + name;
        if (r.find(key) == nullptr) r.fields.emplace_back(std::move(key), std::string(value));
      }
      ++i;
    }
    while (i < lines.size() && lines[i].empty()) ++i;
    std::string body;
    while (i < lines.size() && !lines[i].empty() && !is_request_line(lines[i])) {
      if (!body.empty()) body += '\n';
      body += lines[i];
      ++i;
    }
    if (!body.empty()) r.fields.emplace_back("body", std::move(body));
    r.truth_label = label;
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace reqsentry
