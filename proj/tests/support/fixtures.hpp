#pragma once

#include <string>

namespace fixtures {

// Web-tier log snippet, trailing comma included.
inline const std::string kNectarSnippet = R"({
  "getAuthType" : null,
  "getPathInfo" : null,
  "cookie: JSESSIONID" : "D8B035F1CD70BC14F7E1804C54911F2B",
  "getRemoteAddr" : "171.66.11.171",
  "getServletPath" : "/home",
  "getMethod" : "GET",
  "getContextPath" : "",
  "getServerName" : "nectarnetwork.org",
  "getPathTranslated" : null,
  "getRequestId" : "D8B035F1CD70BC14F7E1804C54911F2B",
  "header: user-agent" : "Mozilla/5.0 (Macintosh; Intel Mac OS X 10",
  "getRequestURL" : "http://nectarnetwork.org/home",
  "header: upgrade-insecure-requests" : "1",
  "header: host" : "nectarnetwork.org",
})";

}  // namespace fixtures
